from django.apps import AppConfig


class OcclabConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'occlab'
    verbose_name = 'Occupancy laboratory'
