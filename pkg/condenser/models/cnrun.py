# This file defines the CNRun model: one row per command invocation, so
# there is a record of which config (by hash) ran with which seed, where
# its output went and how it ended.

import logging

from django.db import models
from django.test import TestCase
from django.utils import timezone

logger = logging.getLogger( __name__ )


# ----------------------------------------------------

class CNRun( models.Model ):

  # we live in a 'models' directory, so the app label has to be given
  class Meta:
    app_label = 'condenser'
    ordering = [ '-started' ]

  # ----------------------------------------------------------
  # database columns

  command = models.CharField( max_length = 40 )
  name = models.CharField( max_length = 100, blank = True )
  config_hash = models.CharField( max_length = 64, blank = True, db_index = True )
  seed = models.BigIntegerField( default = 0 )
  directory = models.CharField( max_length = 500, blank = True )
  started = models.DateTimeField()
  finished = models.DateTimeField( null = True, blank = True )

  # None until the run ends; 'passed' stays None for commands with no
  # diagnostics
  exit_code = models.IntegerField( null = True, blank = True )
  passed = models.BooleanField( null = True )
  summary = models.JSONField( default = dict, blank = True )

  def __str__( self ):
    state = "running" if self.exit_code is None else "exit {}".format( self.exit_code )
    return "{} {} ({})".format( self.command, self.name or self.config_hash[:12], state )

  # ----------------------------------------------------------

  @classmethod
  def start( cls, command, name = '', config_hash = '', seed = 0, directory = '' ):
    run = cls.objects.create( command = command, name = name, config_hash = config_hash or '',
      seed = seed, directory = directory or '', started = timezone.now() )
    logger.debug( "run %d started: %s", run.id, run )
    return run

  def finish( self, exit_code, passed = None, summary = None ):
    self.exit_code = exit_code
    self.passed = passed
    self.summary = summary or {}
    self.finished = timezone.now()
    self.save()
    return self

  def is_finished( self ):
    return self.finished is not None

  def duration( self ):
    if ( not self.is_finished() ):
      return None
    return ( self.finished - self.started ).total_seconds()

  # earlier runs of the same config and seed
  def previous( self ):
    return CNRun.objects.filter( config_hash = self.config_hash, seed = self.seed,
      started__lt = self.started ).exclude( id = self.id )

  @classmethod
  def for_config( cls, config_hash ):
    return cls.objects.filter( config_hash = config_hash )


# ----------------------------------------------------

class CNRunTest( TestCase ):

  fixtures = [ 'cnrun.json' ]

  def test_fixture_loads( self ):
    run = CNRun.objects.get( pk = 1 )
    self.assertEqual( run.command, 'solve' )
    self.assertTrue( run.passed )
    self.assertEqual( run.summary['frostman']['passed'], True )
    self.assertEqual( run.duration(), 42.0 )

  def test_start_and_finish( self ):
    run = CNRun.start( 'capacity', name = 'disc', seed = 3 )
    self.assertFalse( run.is_finished() )
    self.assertIsNone( run.duration() )
    run.finish( 0, summary = { 'capacity': 0.63 } )
    stored = CNRun.objects.get( id = run.id )
    self.assertEqual( stored.exit_code, 0 )
    self.assertIsNone( stored.passed )
    self.assertAlmostEqual( stored.summary['capacity'], 0.63 )
    self.assertGreaterEqual( stored.duration(), 0.0 )

  def test_previous_runs_of_a_config( self ):
    run = CNRun.start( 'solve', config_hash = 'ab' * 32, seed = 0 )
    self.assertEqual( list( run.previous() ), [ CNRun.objects.get( pk = 1 ) ] )
    self.assertEqual( CNRun.for_config( 'ab' * 32 ).count(), 2 )
    self.assertIn( 'exit 0', str( CNRun.objects.get( pk = 1 ) ) )
