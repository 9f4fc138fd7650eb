import setuptools

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setuptools.setup(
    name="django-aegan",
    version="0.1.0",
    author="Panji Y. Wiwaha",
    author_email="panjiyudasetya@gmail.com",
    description="A Django app to synthesize standard-dose PET from low-dose PET with a residual-estimation GAN",
    long_description=long_description,
    long_description_content_type="text/markdown",
    url="https://github.com/panjiyudasetya/django-aegan",
    project_urls={
        "Bug Tracker": "https://github.com/panjiyudasetya/django-aegan/issues",
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    packages=setuptools.find_packages(exclude=('test_project', 'test_project.*', 'examples', 'examples.*')),
    python_requires=">=3.8",
    install_requires=[
        'django>=3.2',
        'djangorestframework',
        'numpy',
        'scipy',
        'scikit-image>=0.19',
        'nibabel',
        'torch>=1.11',
        'matplotlib',
    ],
    extras_require={
        'test': ['hypothesis', 'pytest>=7', 'pytest-django'],
    }
)
