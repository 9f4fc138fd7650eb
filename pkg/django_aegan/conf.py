import os
from pathlib import Path
from typing import Any, Dict

from django.conf import settings


DEFAULTS: Dict[str, Any] = {
    'CACHE_DIR': None,
    'SUV_SCALE': 20.0,
    'PATCH_SHAPE': (32, 32, 16),
    'PATCH_STRIDE': (16, 16, 8),
    'VOLUME_FORMAT': 'raw',
    'RECORD_RUNS': True,
}


class AeganSettings:
    """
    Lazy accessor of the `AEGAN` dict declared in the project settings.

    Missing keys fall back to `DEFAULTS`; an unset `CACHE_DIR` falls back
    to the `AEGAN_CACHE` environment variable, then to `~/.cache/aegan`.
    """

    def __getattr__(self, name: str) -> Any:
        if name not in DEFAULTS:
            raise AttributeError("Invalid AEGAN setting: '{}'".format(name))

        user_settings = getattr(settings, 'AEGAN', {})
        value = user_settings.get(name, DEFAULTS[name])

        if name == 'CACHE_DIR':
            value = value or os.environ.get('AEGAN_CACHE') or Path.home() / '.cache' / 'aegan'
            return Path(value)
        if name in ('PATCH_SHAPE', 'PATCH_STRIDE'):
            return tuple(int(v) for v in value)
        return value


aegan_settings = AeganSettings()
