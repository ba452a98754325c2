from django.apps import AppConfig


class CondenserConfig( AppConfig ):
  name = 'condenser'
  verbose_name = 'Constrained condenser energy problems'
  default_auto_field = 'django.db.models.BigAutoField'
