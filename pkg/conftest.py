"""Configure Django before pytest collects the hear test-suite."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'hearproject.settings')
django.setup()
