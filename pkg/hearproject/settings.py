"""
Django settings for the hearproject project.

The project has no web surface and no database: Django provides the
management-command CLI, the settings layer and the test runner.
Everything run-specific is read from the environment (optionally via a
.env file) and from RunConfig files, see hear/config.py.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('SECRET_KEY', 'hear-local-only')

DEBUG = os.environ.get('DEBUG', 'True').lower() == 'true'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'hear',
]

# No relational storage: datasets, checkpoints and results are plain files.
DATABASES = {}

TIME_ZONE = 'UTC'

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# HEAR paths and defaults

HEAR_DATA_DIR = Path(os.environ.get('HEAR_DATA_DIR', BASE_DIR / 'data'))

HEAR_OUTPUT_DIR = Path(os.environ.get('HEAR_OUTPUT_DIR', BASE_DIR / 'runs'))

HEAR_DICTIONARY_PATH = Path(
    os.environ.get('HEAR_DICTIONARY_PATH', BASE_DIR / 'hear' / 'data' / 'channel_dictionary.txt')
)

HEAR_LOG_LEVEL = os.environ.get('HEAR_LOG_LEVEL', 'INFO').upper()


# Create logs directory if it doesn't exist
LOGS_DIR = BASE_DIR / 'logs'
if not os.path.exists(LOGS_DIR):
    os.makedirs(LOGS_DIR)

# Logging configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': HEAR_LOG_LEVEL,
            'class': 'logging.FileHandler',
            'filename': LOGS_DIR / 'hear.log',
            'formatter': 'verbose',
        },
        'console': {
            'level': HEAR_LOG_LEVEL,
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['file', 'console'],
            'level': 'INFO',
            'propagate': True,
        },
        'hear': {
            'handlers': ['file', 'console'],
            'level': HEAR_LOG_LEVEL,
            'propagate': False,
        },
    },
}
