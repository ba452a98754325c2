# Django settings for the condenser project.
#
# Nothing here serves web pages: Django gives us the settings layer, the
# logging configuration, the management-command runner that the CLI is
# built on, the forms used to validate run configs, the ORM for the run
# registry and the test runner.

import os

import dj_database_url

# The project starts at condenserlab/ rather than top-level at the
# application, but we use a lot of things from the condenser/ folder.
# Create a global for the condenser folder as well.
PROJECT_PATH = os.path.realpath( os.path.dirname( __file__ ) )   # condenserlab/
ROOT_PATH = os.path.dirname( PROJECT_PATH )
CONDENSER_APP_PATH = os.path.join( ROOT_PATH, 'condenser' )

DEBUG = bool( os.environ.get( 'CONDENSER_DEBUG', False ) )

# The run registry.  Locally it's a sqlite file next to manage.py; set
# DATABASE_URL to point it somewhere else (dj_database_url understands
# the usual postgres://, mysql:// and sqlite:// forms).
DATABASES = {
  'default': dj_database_url.config(
    default = 'sqlite:///' + os.path.join( ROOT_PATH, 'condenser.sqlite3' ) ),
}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

TIME_ZONE = 'UTC'
LANGUAGE_CODE = 'en-us'
USE_I18N = True
USE_TZ = True

# Only used for signing, which we never do; still required by Django.
SECRET_KEY = os.environ.get( 'CONDENSER_SECRET_KEY', 'condenser-local-only-not-secret' )

INSTALLED_APPS = (
  'django.contrib.contenttypes',
  'condenser',
)


# Numerical defaults.  Every one of these can be overridden per run in the
# experiment config (see condenser/cnconfig.py); modules read them through
# condenser.cnconf.setting().
CONDENSER = {
  # diagonal (self-energy) rule: kernel at separation BETA * cell_radius
  'BETA': 0.5,
  # QP stopping rule: KKT residual <= TOLERANCE * diagonal scale
  'TOLERANCE': 1e-7,
  'MAX_ITERATIONS': 20000,
  # projected-gradient sweeps before the active-set polish takes over
  'PG_ITERATIONS': 600,
  # admissibility checks (mass normalisation, mu+ <= xi)
  'MASS_TOLERANCE': 1e-8,
  # A2 truncation: outer radius = TRUNCATION_FACTOR * diameter(A1)
  'TRUNCATION_FACTOR': 100.0,
  'BOUNDARY_FRACTION': 0.5,
  # A2 spacing grows by SPACING_GROWTH per unit distance past the footprint of A1
  'SPACING_GROWTH': 0.5,
  # mass-weighted violation threshold for the diagnostics
  'DIAGNOSTIC_THRESHOLD': 0.02,
  'THREADS': 1,
  'RUNS_DIR': os.path.join( ROOT_PATH, 'runs' ),
}

# Everything under the 'condenser' logger goes to the console.  The
# commands' --quiet flag raises that logger to WARNING.
LOGGING = {
  'version': 1,
  'disable_existing_loggers': False,
  'formatters': {
    'timestamped': {
      'format': '%(asctime)s %(levelname)-7s %(name)s: %(message)s',
    },
  },
  'handlers': {
    'console': {
      'level': 'DEBUG',
      'class': 'logging.StreamHandler',
      'formatter': 'timestamped',
    },
  },
  'loggers': {
    'condenser': {
      'handlers': ['console'],
      'level': os.environ.get( 'CONDENSER_LOG_LEVEL', 'INFO' ),
      'propagate': False,
    },
  },
}
