"""
Django settings for the occupancy laboratory.

The project has no web surface: it runs as management commands
(`python manage.py <subcommand>`) backed by a small run ledger database.
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    'DJANGO_SECRET_KEY',
    'django-insecure-occlab-development-key-change-me',
)

DEBUG = os.environ.get('DJANGO_DEBUG', '') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'occlab',
]


# Database
# SQLite by default; set OCCLAB_DB_ENGINE=postgresql for a shared ledger.

if os.environ.get('OCCLAB_DB_ENGINE') == 'postgresql':
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.postgresql',
            'NAME': os.environ.get('OCCLAB_DB_NAME', 'occlab'),
            'USER': os.environ.get('OCCLAB_DB_USER', 'occlab'),
            'PASSWORD': os.environ.get('OCCLAB_DB_PASSWORD', ''),
            'HOST': os.environ.get('OCCLAB_DB_HOST', 'localhost'),
            'PORT': os.environ.get('OCCLAB_DB_PORT', '5432'),
        }
    }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': BASE_DIR / 'occlab.sqlite3',
        }
    }


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Default primary key field type

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Laboratory

OCCLAB_OUTDIR = Path(os.environ.get('OCCLAB_OUTDIR', BASE_DIR / 'runs'))

OCCLAB_CONFIG_DIR = BASE_DIR / 'configs'

OCCLAB_LOG_LEVEL = os.environ.get('OCCLAB_LOG_LEVEL', 'INFO')


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'occlab': {
            'handlers': ['console'],
            'level': OCCLAB_LOG_LEVEL,
            'propagate': False,
        },
    },
}
