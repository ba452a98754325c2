# This file writes a run's results into its output directory:
#
#   solution.csv        one row per node: index, x1..xn, weight_plus,
#                       weight_minus, potential, weighted_potential,
#                       constraint_slack
#   lambda_plus.csv     the nonzero weights of each part
#   lambda_minus.csv
#   xi.csv
#   diagnostics.json    the reports of the run
#   manifest.json       config, seed, versions, timestamp, cloud fingerprint
#   config.toml         the config text as it was read
#   riesz.bin, green.bin          ('matrix' format)
#   trace_<path>.csv              ('trace' format)

import csv
import json
import logging
import math
import os
import platform
import tempfile
from importlib import metadata

import numpy as np

from django.test import TestCase
from django.utils import timezone

from condenser.cngeometry import A1, CNDomain, CNPointCloud
from condenser.cnkernel import CNKernelMatrix
from condenser.cnmeasure import CNMeasure, CNSignedMeasure, potential
from condenser.cnsolver import CNProblem, CNSolution, solve_green_constrained

logger = logging.getLogger( __name__ )

PACKAGES = ( 'Django', 'numpy', 'scipy' )


# ----------------------------------------------------
# numpy values and non-finite floats made safe for json

def jsonable( value ):
  if ( isinstance( value, dict ) ):
    return { str( k ): jsonable( v ) for k, v in value.items() }
  if ( isinstance( value, ( list, tuple ) ) ):
    return [ jsonable( v ) for v in value ]
  if ( isinstance( value, np.ndarray ) ):
    return jsonable( value.tolist() )
  if ( isinstance( value, np.bool_ ) ):
    return bool( value )
  if ( isinstance( value, np.integer ) ):
    return int( value )
  if ( isinstance( value, ( float, np.floating ) ) ):
    value = float( value )
    return value if math.isfinite( value ) else None
  return value

def versions():
  found = { 'python': platform.python_version() }
  for name in PACKAGES:
    try:
      found[name] = metadata.version( name )
    except metadata.PackageNotFoundError:
      found[name] = None
  return found

def number( value ):
  return '' if value is None or not np.isfinite( value ) else repr( float( value ) )


# ----------------------------------------------------

class CNRunWriter:

  def __init__( self, directory, formats = ( 'csv', 'json' ) ):
    self.directory = directory
    self.formats = list( formats )
    self.written = []
    os.makedirs( directory, exist_ok = True )

  def __repr__( self ):
    return "CNRunWriter({}, {})".format( self.directory, ",".join( self.formats ) )

  def path( self, name ):
    return os.path.join( self.directory, name )

  def wants( self, fmt ):
    return fmt in self.formats

  def wrote( self, name ):
    if ( name not in self.written ):
      self.written.append( name )
    return self.path( name )

  def write_json( self, name, data ):
    with open( self.wrote( name ), 'w' ) as out:
      json.dump( jsonable( data ), out, indent = 2, sort_keys = True )
      out.write( '\n' )

  # Per node values of a solved problem.  The potential is the Riesz
  # potential of lambda when the Riesz matrix exists and the Green
  # potential of lambda+ on A1 otherwise (blank on A2 then).
  def solution_rows( self, solution ):
    problem = solution.problem
    cloud = problem.cloud
    count = len( cloud )
    values = np.full( count, np.nan )
    if ( problem.riesz is not None ):
      values[problem.riesz.indices] = potential( solution.lam, problem.riesz )
    else:
      values[problem.a1] = potential( solution.lam.plus, problem.green, problem.a1 )
    slack = np.full( count, np.nan )
    slack[problem.a1] = problem.xi.weights[problem.a1] - solution.lam.plus.weights[problem.a1]
    weighted = values + problem.field.values
    plus, minus = solution.lam.plus.weights, solution.lam.minus.weights
    for i in range( count ):
      yield ( [ i ] + [ repr( float( x ) ) for x in cloud.points[i] ] +
        [ repr( float( plus[i] ) ), repr( float( minus[i] ) ),
          number( values[i] ), number( weighted[i] ), number( slack[i] ) ] )

  def write_solution( self, solution ):
    if ( not self.wants( 'csv' ) ):
      return
    cloud = solution.problem.cloud
    header = ( [ 'index' ] + [ 'x{}'.format( k + 1 ) for k in range( cloud.dimension ) ] +
      [ 'weight_plus', 'weight_minus', 'potential', 'weighted_potential', 'constraint_slack' ] )
    with open( self.wrote( 'solution.csv' ), 'w', newline = '' ) as out:
      writer = csv.writer( out )
      writer.writerow( header )
      writer.writerows( self.solution_rows( solution ) )
    self.write_measure( 'lambda_plus.csv', solution.lam.plus )
    self.write_measure( 'lambda_minus.csv', solution.lam.minus )
    self.write_measure( 'xi.csv', solution.problem.xi )

  def write_measure( self, name, measure ):
    if ( self.wants( 'csv' ) ):
      measure.write_csv( self.wrote( name ) )

  def write_traces( self, traces ):
    if ( not self.wants( 'trace' ) ):
      return
    for name, rows in sorted( traces.items() ):
      with open( self.wrote( 'trace_{}.csv'.format( name ) ), 'w', newline = '' ) as out:
        writer = csv.writer( out )
        writer.writerow( [ 'iteration', 'objective', 'residual' ] )
        for iteration, objective, residual in rows:
          writer.writerow( [ int( iteration ), repr( float( objective ) ), repr( float( residual ) ) ] )

  def write_matrices( self, problem ):
    if ( not self.wants( 'matrix' ) ):
      return
    for name, matrix in ( ( 'riesz.bin', problem.riesz ), ( 'green.bin', problem.green ) ):
      if ( matrix is not None ):
        matrix.dump( self.wrote( name ) )

  def write_diagnostics( self, reports ):
    if ( self.wants( 'json' ) ):
      self.write_json( 'diagnostics.json', reports )

  def write_config( self, config ):
    if ( config is None or not config.text ):
      return
    with open( self.wrote( 'config.toml' ), 'w' ) as out:
      out.write( config.text )

  # always written, last, so it can list everything else
  def write_manifest( self, command, config = None, cloud = None, seed = None, extra = None ):
    manifest = {
      'command': command,
      'created': timezone.now().isoformat(),
      'versions': versions(),
      'seed': config.seed if seed is None and config is not None else seed,
      'config': config.describe() if config is not None else None,
      'cloud': None if cloud is None else {
        'nodes': len( cloud ),
        'A1': int( len( cloud.a1 ) ),
        'A2': int( len( cloud.a2 ) ),
        'sha256': cloud.fingerprint(),
        'truncation_radius': cloud.truncation_radius,
      },
      'files': list( self.written ),
    }
    if ( extra ):
      manifest.update( extra )
    self.write_json( 'manifest.json', manifest )
    logger.info( "wrote %d files to %s", len( self.written ), self.directory )
    return manifest

  # everything a solve produces
  def write_run( self, command, solution, reports, config = None ):
    problem = solution.problem
    self.write_config( config )
    self.write_solution( solution )
    self.write_traces( solution.traces )
    self.write_matrices( problem )
    self.write_diagnostics( { 'problem': problem.describe(), 'solution': solution.describe(),
      'reports': reports } )
    return self.write_manifest( command, config, problem.cloud )


# ----------------------------------------------------

class CNRunWriterTest( TestCase ):

  def setUp( self ):
    self.scratch = tempfile.TemporaryDirectory()
    self.addCleanup( self.scratch.cleanup )
    cloud = CNPointCloud( [ [ 1.0, 1.0, 0.0 ], [ 1.0, -1.0, 0.0 ] ], [ 0.5, 0.5 ], [ A1, A1 ] )
    problem = CNProblem.create( CNDomain.halfspace( 3, 2.0 ), cloud, CNMeasure( cloud, [ 1.0, 1.0 ] ) )
    plus = solve_green_constrained( problem )
    self.solution = CNSolution( problem, CNSignedMeasure( plus, CNMeasure.zero( cloud ) ), plus )
    self.solution.traces['green'] = plus.meta['trace']

  def read_csv( self, name ):
    with open( os.path.join( self.scratch.name, name ), newline = '' ) as source:
      return list( csv.reader( source ) )

  def test_solution_columns( self ):
    writer = CNRunWriter( self.scratch.name )
    writer.write_solution( self.solution )
    rows = self.read_csv( 'solution.csv' )
    self.assertEqual( rows[0], [ 'index', 'x1', 'x2', 'x3', 'weight_plus', 'weight_minus', 'potential',
      'weighted_potential', 'constraint_slack' ] )
    self.assertEqual( len( rows ), 3 )
    self.assertAlmostEqual( float( rows[1][4] ), 0.5, places = 6 )
    self.assertAlmostEqual( float( rows[1][8] ), 0.5, places = 6 )

  def test_formats_gate_outputs( self ):
    writer = CNRunWriter( self.scratch.name, formats = [ 'json' ] )
    manifest = writer.write_run( 'solve', self.solution, { 'passed': True } )
    self.assertNotIn( 'solution.csv', manifest['files'] )
    self.assertNotIn( 'green.bin', manifest['files'] )
    self.assertIn( 'diagnostics.json', manifest['files'] )
    self.assertIn( 'manifest.json', os.listdir( self.scratch.name ) )

  def test_matrix_and_trace( self ):
    writer = CNRunWriter( self.scratch.name, formats = [ 'matrix', 'trace' ] )
    writer.write_run( 'solve', self.solution, {} )
    green = CNKernelMatrix.load( writer.path( 'green.bin' ) )
    self.assertTrue( np.array_equal( green.values, self.solution.problem.green.values ) )
    rows = self.read_csv( 'trace_green.csv' )
    self.assertEqual( rows[0], [ 'iteration', 'objective', 'residual' ] )
    self.assertGreater( len( rows ), 1 )

  def test_manifest_fields( self ):
    writer = CNRunWriter( self.scratch.name )
    manifest = writer.write_manifest( 'capacity', cloud = self.solution.problem.cloud, seed = 4 )
    with open( writer.path( 'manifest.json' ) ) as source:
      stored = json.load( source )
    self.assertEqual( stored['seed'], 4 )
    self.assertEqual( stored['cloud']['sha256'], self.solution.problem.cloud.fingerprint() )
    self.assertIn( 'numpy', stored['versions'] )
    self.assertEqual( manifest['command'], 'capacity' )

  def test_jsonable( self ):
    self.assertEqual( jsonable( { 'a': np.float64( np.inf ), 'b': np.arange( 2 ), 'c': np.bool_( True ) } ),
      { 'a': None, 'b': [ 0, 1 ], 'c': True } )
