# Access to the numerical defaults in settings.CONDENSER.  A run config
# may override any of them; callers that have a run config pass the
# override in and fall back to the project default otherwise.

from django.conf import settings
from django.test import TestCase, override_settings

# used when a setting is missing from settings.CONDENSER altogether
DEFAULTS = {
  'BETA': 0.5,
  'TOLERANCE': 1e-7,
  'MAX_ITERATIONS': 20000,
  'PG_ITERATIONS': 600,
  'MASS_TOLERANCE': 1e-8,
  'TRUNCATION_FACTOR': 100.0,
  'BOUNDARY_FRACTION': 0.5,
  'SPACING_GROWTH': 0.5,
  'DIAGNOSTIC_THRESHOLD': 0.02,
  'THREADS': 1,
  'RUNS_DIR': 'runs',
}

def setting( name, override = None ):
  if ( override is not None ):
    return override
  configured = getattr( settings, 'CONDENSER', {} )
  if ( name in configured ):
    return configured[name]
  return DEFAULTS[name]


# ----------------------------------------------------

class CNConfTest( TestCase ):

  def test_project_default( self ):
    self.assertEqual( setting( 'MAX_ITERATIONS' ), settings.CONDENSER['MAX_ITERATIONS'] )

  def test_override_wins( self ):
    self.assertEqual( setting( 'BETA', 0.7 ), 0.7 )

  @override_settings( CONDENSER = {} )
  def test_missing_falls_back( self ):
    self.assertEqual( setting( 'TRUNCATION_FACTOR' ), 100.0 )
