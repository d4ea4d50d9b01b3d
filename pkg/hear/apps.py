from django.apps import AppConfig


class HearConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'hear'
    verbose_name = 'HEAR heterogeneous-electrode EEG'
