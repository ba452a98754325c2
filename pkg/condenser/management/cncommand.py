# The base class of the condenser management commands.  It owns the flags
# every command shares (--config, --out, --seed, --threads, --quiet), maps
# CNError to Django's CommandError with the error's exit code, and keeps
# one CNRun row per invocation.
#
# Exit codes: 0 everything passed, 2 the run could not be built, 3 a
# solver failed, 4 a diagnostic threshold failed.

import hashlib
import json
import logging
import os
import tempfile
from contextlib import contextmanager

from django.conf import settings
from django.core.management import call_command
from django.core.management.base import BaseCommand, CommandError
from django.db import DatabaseError
from django.test import TestCase
from django.test.utils import override_settings

from condenser import cnconf
from condenser.cnconfig import DEFAULT_FORMATS, CNRunConfig
from condenser.cnerrors import EXIT_CONFIG, EXIT_DIAGNOSTICS, EXIT_OK, EXIT_SOLVER, CNError, ConfigError
from condenser.cnoutput import CNRunWriter, jsonable
from condenser.models import CNRun

logger = logging.getLogger( __name__ )


@contextmanager
def quieted( quiet ):
  package = logging.getLogger( 'condenser' )
  level = package.level
  if ( quiet ):
    package.setLevel( logging.WARNING )
  try:
    yield
  finally:
    package.setLevel( level )

# MAX_ITERATIONS is read deep inside the QP; a run config that sets it
# applies it for the duration of the run
@contextmanager
def run_settings( config ):
  limit = None if config is None else config.solver.get( 'max_iterations' )
  if ( limit is None ):
    yield
    return
  merged = dict( getattr( settings, 'CONDENSER', {} ), MAX_ITERATIONS = limit )
  with override_settings( CONDENSER = merged ):
    yield


# ----------------------------------------------------

class CNCommand( BaseCommand ):

  # subclasses that cannot work without a run config say so
  needs_config = False

  def add_arguments( self, parser ):
    parser.add_argument( '--config', help = "TOML run config" )
    parser.add_argument( '--out', help = "output directory (overrides output.directory)" )
    parser.add_argument( '--seed', type = int, help = "seed (overrides run.seed)" )
    parser.add_argument( '--threads', type = int, help = "assembly threads (overrides solver.threads)" )
    parser.add_argument( '--quiet', action = 'store_true', help = "log warnings and errors only" )
    self.add_command_arguments( parser )

  def add_command_arguments( self, parser ):
    pass

  # Subclasses implement run(); it returns ( exit_code, passed, summary ).
  def run( self, config, options ):
    raise NotImplementedError

  @property
  def command_name( self ):
    return self.__module__.rsplit( '.', 1 )[-1]

  def handle( self, *args, **options ):
    self.options = options
    with quieted( options['quiet'] ):
      config = self.load_config( options )
      registry = self.record_start( config, options )
      try:
        with run_settings( config ):
          exit_code, passed, summary = self.run( config, options )
      except CNError as error:
        logger.error( "%s failed: %s", self.command_name, error )
        self.record_finish( registry, error.exit_code, None, { 'error': str( error ), 'type': type( error ).__name__ } )
        raise CommandError( str( error ), returncode = error.exit_code )
      self.record_finish( registry, exit_code, passed, summary )
    if ( exit_code != EXIT_OK ):
      raise CommandError( "{}: diagnostics did not pass".format( self.command_name ), returncode = exit_code )

  def load_config( self, options ):
    path = options.get( 'config' )
    if ( not path ):
      if ( self.needs_config ):
        raise CommandError( "{} needs --config".format( self.command_name ), returncode = ConfigError.exit_code )
      return None
    try:
      config = CNRunConfig.load( path )
    except ConfigError as error:
      raise CommandError( str( error ), returncode = error.exit_code )
    return config.override( options.get( 'seed' ), options.get( 'threads' ), options.get( 'out' ) )

  # ----------------------------------------------------
  # flags that fall back to the config, then the project settings

  def seed( self, config ):
    if ( config is not None ):
      return config.seed
    return self.options.get( 'seed' ) or 0

  def threads( self, config ):
    if ( config is not None ):
      return config.threads
    return self.options.get( 'threads' )

  def directory( self, config, name = None ):
    if ( config is not None ):
      return config.directory
    if ( self.options.get( 'out' ) ):
      return self.options['out']
    return os.path.join( cnconf.setting( 'RUNS_DIR' ), name or self.command_name )

  def writer( self, config, name = None ):
    formats = config.formats if config is not None else DEFAULT_FORMATS
    return CNRunWriter( self.directory( config, name ), formats )

  def say( self, message, passed = None ):
    if ( self.options.get( 'quiet' ) ):
      return
    if ( passed is True ):
      message = self.style.SUCCESS( message )
    elif ( passed is False ):
      message = self.style.ERROR( message )
    self.stdout.write( message )

  def verdict( self, passed ):
    return EXIT_OK if passed else EXIT_DIAGNOSTICS

  # ----------------------------------------------------
  # the run registry is a record, not a requirement

  def record_start( self, config, options ):
    try:
      return CNRun.start( self.command_name,
        name = config.name if config is not None else '',
        config_hash = config.digest if config is not None else '',
        seed = self.seed( config ),
        directory = config.directory if config is not None else ( options.get( 'out' ) or '' ) )
    except DatabaseError as error:
      logger.warning( "run registry unavailable, not recording this run: %s", error )
      return None

  def record_finish( self, registry, exit_code, passed, summary ):
    if ( registry is None ):
      return
    try:
      registry.finish( exit_code, None if passed is None else bool( passed ), jsonable( summary ) )
    except DatabaseError as error:
      logger.warning( "could not record the end of run %s: %s", registry.id, error )


# ----------------------------------------------------

# A1 only, so the run is a Green problem; the loose threshold keeps the
# test about plumbing rather than discretization error
GREEN_ONLY = """
[run]
name = "green-only"

[domain]
kind = "halfspace"
alpha = 2.0

[plates.a1]
shape = "disc_series"
nodes = 30
levels = 2

[constraint]
shape = "disc_series"

[solver]
threshold = 1e6

[output]
formats = [ "csv", "json", "trace" ]
"""

class CNCommandTest( TestCase ):

  def setUp( self ):
    self.scratch = tempfile.TemporaryDirectory()
    self.addCleanup( self.scratch.cleanup )
    self.out = os.path.join( self.scratch.name, 'out' )

  def config( self, text ):
    path = os.path.join( self.scratch.name, 'run.toml' )
    with open( path, 'w' ) as out:
      out.write( text )
    return path

  def test_solve_writes_a_run( self ):
    path = self.config( GREEN_ONLY )
    call_command( 'solve', config = path, out = self.out, quiet = True )
    written = os.listdir( self.out )
    for name in ( 'solution.csv', 'lambda_plus.csv', 'xi.csv', 'diagnostics.json', 'manifest.json',
                  'config.toml', 'trace_green.csv' ):
      self.assertIn( name, written )
    with open( os.path.join( self.out, 'manifest.json' ) ) as source:
      manifest = json.load( source )
    with open( path, 'rb' ) as source:
      digest = hashlib.sha256( source.read() ).hexdigest()
    self.assertEqual( manifest['config']['sha256'], digest )
    run = CNRun.objects.get()
    self.assertEqual( ( run.command, run.exit_code, run.passed ), ( 'solve', 0, True ) )
    self.assertEqual( run.config_hash, digest )

  def test_missing_config( self ):
    with self.assertRaises( CommandError ) as caught:
      call_command( 'solve', quiet = True )
    self.assertEqual( caught.exception.returncode, EXIT_CONFIG )

  def test_bad_config( self ):
    path = self.config( GREEN_ONLY.replace( 'alpha = 2.0', 'alpha = 2.5' ) )
    with self.assertRaises( CommandError ) as caught:
      call_command( 'solve', config = path, out = self.out, quiet = True )
    self.assertEqual( caught.exception.returncode, EXIT_CONFIG )
    self.assertIn( 'domain.alpha', str( caught.exception ) )

  def test_build_error_is_recorded( self ):
    with self.assertRaises( CommandError ) as caught:
      call_command( 'experiment', 'unbounded-constraint', levels = 1, out = self.out, quiet = True )
    self.assertEqual( caught.exception.returncode, EXIT_CONFIG )
    run = CNRun.objects.get()
    self.assertEqual( run.exit_code, EXIT_CONFIG )
    self.assertEqual( run.summary['type'], 'InfeasibleSpec' )

  def test_solver_side_error( self ):
    text = GREEN_ONLY.replace( '[solver]', '[field]\ncase = "case_two"\nsources = [ [ 0.2, 0.0, 0.0 ] ]\n'
      'weights = [ 1.0 ]\n\n[solver]' )
    with self.assertRaises( CommandError ) as caught:
      call_command( 'experiment', 'duality', config = self.config( text ), out = self.out, quiet = True )
    self.assertEqual( caught.exception.returncode, EXIT_SOLVER )

  def test_capacity( self ):
    call_command( 'capacity', shape = 'disc', nodes = 60, out = self.out, quiet = True )
    with open( os.path.join( self.out, 'capacity.json' ) ) as source:
      report = json.load( source )
    self.assertGreater( report['capacity'], 0.0 )
    self.assertIn( 'continuum_2r_over_pi', report['reference'] )
    self.assertIn( 'equilibrium.csv', os.listdir( self.out ) )
    self.assertIsNone( CNRun.objects.get().passed )

  def test_calibrate_beta_reproduces_quoted_capacity( self ):
    call_command( 'calibrate_beta', target = 0.2026, nodes = 120, out = self.out, quiet = True )
    with open( os.path.join( self.out, 'calibration.json' ) ) as source:
      report = json.load( source )
    self.assertEqual( report['target'], 0.2026 )
    self.assertAlmostEqual( report['capacity'], 0.2026, places = 6 )
    low, high = report['bracket']
    self.assertTrue( low <= report['beta'] <= high )
    self.assertEqual( CNRun.objects.get().exit_code, EXIT_OK )

  def test_verdict( self ):
    self.assertEqual( CNCommand().verdict( True ), EXIT_OK )
    self.assertEqual( CNCommand().verdict( False ), EXIT_DIAGNOSTICS )
