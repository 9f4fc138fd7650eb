from django.apps import AppConfig


class DjangoAeganConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'django_aegan'
    verbose_name = 'Low-dose PET synthesis lab'
