# This file defines the errors raised by the condenser modules.  Every
# error carries the process exit code the management commands use when
# the error escapes a run:
#
#   2  the run was asked for something that can't be built (bad config,
#      impossible plate, wrong dimension, wrong domain)
#   3  a solver or a numerical precondition failed
#
# Exit code 4 (a diagnostic threshold failed) is not an error; it comes
# from the reports themselves.

from django.test import TestCase

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_DIAGNOSTICS = 4


class CNError( Exception ):

  exit_code = EXIT_SOLVER

  def __init__( self, message, **details ):
    super().__init__( message )
    self.message = message
    self.details = details

  def __str__( self ):
    if ( self.details ):
      extra = ", ".join( "{}={}".format( k, v ) for k, v in sorted( self.details.items() ) )
      return "{} ({})".format( self.message, extra )
    return self.message


# ----------------------------------------------------
# build-time errors: exit code 2

class ConfigError( CNError ):
  exit_code = EXIT_CONFIG

  # 'field' is 'block.key' so the user knows where to look; 'line' is
  # only known for TOML syntax errors.
  def __init__( self, message, field = None, line = None ):
    details = {}
    if ( field ):
      details['field'] = field
    if ( line ):
      details['line'] = line
    super().__init__( message, **details )
    self.field = field
    self.line = line

class InfeasibleSpec( CNError ):
  exit_code = EXIT_CONFIG

class DimensionMismatch( CNError ):
  exit_code = EXIT_CONFIG

class UnsupportedDomain( CNError ):
  exit_code = EXIT_CONFIG


# ----------------------------------------------------
# numerical errors: exit code 3

class SingularPair( CNError ):
  pass

class OutsideDomain( CNError ):
  pass

class CloudMismatch( CNError ):
  pass

class NotPositiveDefinite( CNError ):
  pass

class SolverDiverged( CNError ):
  pass

# the feasible set of a constrained problem is empty or degenerate
class Infeasible( CNError ):
  pass

class InvalidSigma( CNError ):

  def __init__( self, message, node = None, **details ):
    if ( node is not None ):
      details['node'] = node
    super().__init__( message, **details )
    self.node = node

class WrongField( CNError ):
  pass


# ----------------------------------------------------

class CNErrorTest( TestCase ):

  def test_exit_codes( self ):
    self.assertEqual( ConfigError( "x" ).exit_code, 2 )
    self.assertEqual( InfeasibleSpec( "x" ).exit_code, 2 )
    self.assertEqual( DimensionMismatch( "x" ).exit_code, 2 )
    self.assertEqual( UnsupportedDomain( "x" ).exit_code, 2 )
    self.assertEqual( SolverDiverged( "x" ).exit_code, 3 )
    self.assertEqual( InvalidSigma( "x", node = 4 ).exit_code, 3 )

  def test_message_names_details( self ):
    err = ConfigError( "must be > 1", field = "constraint.q", line = 7 )
    self.assertIn( "constraint.q", str( err ) )
    self.assertIn( "line=7", str( err ) )
    self.assertEqual( InvalidSigma( "below", node = 12 ).node, 12 )
    self.assertEqual( str( SolverDiverged( "stalled" ) ), "stalled" )
