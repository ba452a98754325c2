# This file reads run configs.  A run config is one TOML file:
#
#   [run]          name, seed
#   [domain]       kind (halfspace | ball), dimension, alpha, center, radius
#   [plates.a1]    shape (ball_interior | disc_series | disc_stack), nodes,
#                  margin, levels, discs = [ { offset, radius, center }, ... ]
#   [plates.a2]    shape (complement_shell | annulus | none), nodes,
#                  truncation_factor, outer_radius, boundary_fraction,
#                  growth, inner_radius
#   [constraint]   shape (scaled_equilibrium | disc_series | weights_file),
#                  q, path
#   [field]        case (zero | case_one | case_two), path, sources, weights
#   [solver]       method (bridge | direct), green_method (closed |
#                  balayage), beta, tolerance, max_iterations, threads,
#                  probes, threshold
#   [output]       directory, formats (csv, json, matrix, trace)
#
# Each block is checked by a Django form, so a bad value comes back as a
# ConfigError naming 'block.key' and, where we can find it, the line.

import hashlib
import logging
import os
import re
try:
  import tomllib
except ModuleNotFoundError:  # Python < 3.11: the same parser, packaged as tomli
  import tomli as tomllib

from django import forms
from django.conf import settings
from django.test import TestCase

from condenser import cnconf
from condenser.cnerrors import ConfigError

logger = logging.getLogger( __name__ )

FORMATS = ( 'csv', 'json', 'matrix', 'trace' )
DEFAULT_FORMATS = [ 'csv', 'json' ]
REQUIRED_BLOCKS = ( 'domain', 'plates', 'constraint' )
PLATES = ( 'a1', 'a2' )


# ----------------------------------------------------
# form fields for the list-valued keys

class PositiveFloatField( forms.FloatField ):

  def validate( self, value ):
    super().validate( value )
    if ( value is not None and not value > 0.0 ):
      raise forms.ValidationError( "must be positive" )

class VectorField( forms.Field ):

  def to_python( self, value ):
    if ( value in self.empty_values ):
      return None
    if ( not isinstance( value, ( list, tuple ) ) ):
      raise forms.ValidationError( "expected a list of numbers" )
    try:
      return [ float( v ) for v in value ]
    except ( TypeError, ValueError ):
      raise forms.ValidationError( "expected a list of numbers" )

class PointListField( forms.Field ):

  def to_python( self, value ):
    if ( value in self.empty_values ):
      return None
    vector = VectorField()
    if ( not isinstance( value, ( list, tuple ) ) ):
      raise forms.ValidationError( "expected a list of points" )
    points = [ vector.to_python( point ) for point in value ]
    if ( any( p is None for p in points ) or len( set( len( p ) for p in points ) ) != 1 ):
      raise forms.ValidationError( "every point needs the same number of coordinates" )
    return points

class ChoiceListField( forms.Field ):

  def __init__( self, choices, **kwargs ):
    super().__init__( **kwargs )
    self.choices = choices

  def to_python( self, value ):
    if ( value in self.empty_values ):
      return None
    if ( not isinstance( value, ( list, tuple ) ) ):
      raise forms.ValidationError( "expected a list" )
    unknown = [ v for v in value if v not in self.choices ]
    if ( unknown ):
      raise forms.ValidationError( "unknown entries {}; choose from {}".format( unknown, list( self.choices ) ) )
    return list( value )

class DiscForm( forms.Form ):
  offset = PositiveFloatField()
  radius = PositiveFloatField()
  center = VectorField( required = False )

class DiscListField( forms.Field ):

  def to_python( self, value ):
    if ( value in self.empty_values ):
      return None
    if ( not isinstance( value, ( list, tuple ) ) ):
      raise forms.ValidationError( "expected a list of discs" )
    discs = []
    for k, table in enumerate( value ):
      if ( not isinstance( table, dict ) ):
        raise forms.ValidationError( "disc {} is not a table".format( k ) )
      unknown = sorted( set( table ) - set( DiscForm.base_fields ) )
      if ( unknown ):
        raise forms.ValidationError( "disc {} has unknown keys {}".format( k, unknown ) )
      form = DiscForm( data = table )
      if ( not form.is_valid() ):
        name, errors = next( iter( form.errors.items() ) )
        raise forms.ValidationError( "disc {} {}: {}".format( k, name, errors[0] ) )
      discs.append( { key: v for key, v in form.cleaned_data.items() if v is not None } )
    return discs


# ----------------------------------------------------
# one form per block

class RunForm( forms.Form ):
  name = forms.CharField( required = False, max_length = 100 )
  seed = forms.IntegerField( required = False, min_value = 0 )

class DomainForm( forms.Form ):
  kind = forms.ChoiceField( choices = ( ( 'halfspace', 'half-space' ), ( 'ball', 'ball' ) ) )
  dimension = forms.IntegerField( required = False, min_value = 3 )
  alpha = forms.FloatField()
  center = VectorField( required = False )
  radius = PositiveFloatField( required = False )

  def clean_alpha( self ):
    alpha = self.cleaned_data['alpha']
    if ( not 0.0 < alpha <= 2.0 ):
      raise forms.ValidationError( "alpha must lie in (0, 2]" )
    return alpha

  def clean( self ):
    cleaned = super().clean()
    dimension = cleaned.get( 'dimension' ) or 3
    cleaned['dimension'] = dimension
    if ( cleaned.get( 'kind' ) == 'ball' ):
      if ( cleaned.get( 'radius' ) is None and 'radius' not in self.errors ):
        self.add_error( 'radius', "a ball needs its radius" )
      center = cleaned.get( 'center' ) or [ 0.0 ] * dimension
      if ( len( center ) != dimension ):
        self.add_error( 'center', "the centre needs {} coordinates".format( dimension ) )
      cleaned['center'] = center
    return cleaned

class A1PlateForm( forms.Form ):
  shape = forms.ChoiceField( choices = ( ( 'ball_interior', 'ball interior' ), ( 'disc_series', 'disc series' ),
    ( 'disc_stack', 'disc stack' ) ) )
  nodes = forms.IntegerField( min_value = 1 )
  margin = forms.FloatField( required = False, min_value = 0.0 )
  levels = forms.IntegerField( required = False, min_value = 1 )
  discs = DiscListField( required = False )

  def clean( self ):
    cleaned = super().clean()
    shape = cleaned.get( 'shape' )
    if ( shape == 'disc_series' ):
      if ( not cleaned.get( 'levels' ) ):
        self.add_error( 'levels', "a disc series needs its number of levels" )
      elif ( cleaned.get( 'nodes' ) and cleaned['nodes'] < cleaned['levels'] ):
        self.add_error( 'nodes', "at least one node per disc" )
    if ( shape == 'disc_stack' and not cleaned.get( 'discs' ) and 'discs' not in self.errors ):
      self.add_error( 'discs', "a disc stack needs its discs" )
    return cleaned

class A2PlateForm( forms.Form ):
  shape = forms.ChoiceField( choices = ( ( 'complement_shell', 'complement shell' ), ( 'annulus', 'annulus' ),
    ( 'none', 'none' ) ) )
  nodes = forms.IntegerField( required = False, min_value = 1 )
  truncation_factor = forms.FloatField( required = False, min_value = 1.0 )
  outer_radius = PositiveFloatField( required = False )
  boundary_fraction = forms.FloatField( required = False )
  growth = forms.FloatField( required = False, min_value = 0.0, max_value = 4.0 )
  inner_radius = forms.FloatField( required = False, min_value = 0.0 )

  def clean_boundary_fraction( self ):
    fraction = self.cleaned_data['boundary_fraction']
    if ( fraction is not None and not 0.0 < fraction <= 1.0 ):
      raise forms.ValidationError( "the boundary fraction must lie in (0, 1]" )
    return fraction

  def clean( self ):
    cleaned = super().clean()
    shape = cleaned.get( 'shape' )
    if ( shape and shape != 'none' and not cleaned.get( 'nodes' ) and 'nodes' not in self.errors ):
      self.add_error( 'nodes', "the A2 plate needs a node count" )
    if ( shape == 'annulus' and not cleaned.get( 'outer_radius' ) and 'outer_radius' not in self.errors ):
      self.add_error( 'outer_radius', "an annulus needs its outer radius" )
    return cleaned

class ConstraintForm( forms.Form ):
  shape = forms.ChoiceField( choices = ( ( 'scaled_equilibrium', 'q times the equilibrium measure' ),
    ( 'disc_series', 'sum of disc equilibria over k^2' ), ( 'weights_file', 'weights from a CSV file' ) ) )
  q = forms.FloatField( required = False )
  path = forms.CharField( required = False )

  def clean( self ):
    cleaned = super().clean()
    shape = cleaned.get( 'shape' )
    if ( shape == 'scaled_equilibrium' and 'q' not in self.errors ):
      q = cleaned.get( 'q' )
      if ( q is None or not q > 1.0 ):
        self.add_error( 'q', "q must exceed 1" )
    if ( shape == 'weights_file' and not cleaned.get( 'path' ) ):
      self.add_error( 'path', "a weights file is needed" )
    return cleaned

class FieldForm( forms.Form ):
  case = forms.ChoiceField( required = False, choices = ( ( 'zero', 'no field' ),
    ( 'case_one', 'given values' ), ( 'case_two', 'potential of sources in D' ) ) )
  path = forms.CharField( required = False )
  sources = PointListField( required = False )
  weights = VectorField( required = False )

  def clean( self ):
    cleaned = super().clean()
    case = cleaned.get( 'case' ) or 'zero'
    cleaned['case'] = case
    if ( case == 'case_one' and not cleaned.get( 'path' ) ):
      self.add_error( 'path', "case I needs a file of field values" )
    if ( case == 'case_two' and not self.errors ):
      sources, weights = cleaned.get( 'sources' ), cleaned.get( 'weights' )
      if ( not sources ):
        self.add_error( 'sources', "case II needs its source points" )
      elif ( weights is None or len( weights ) != len( sources ) ):
        self.add_error( 'weights', "one weight per source" )
      elif ( any( w < 0.0 for w in weights ) ):
        self.add_error( 'weights', "source weights must be nonnegative" )
    return cleaned

class SolverForm( forms.Form ):
  method = forms.ChoiceField( required = False, choices = ( ( 'bridge', 'Green solve, then sweep' ),
    ( 'direct', 'signed QP' ) ) )
  green_method = forms.ChoiceField( required = False, choices = ( ( 'closed', 'closed form' ),
    ( 'balayage', 'from balayage' ) ) )
  beta = PositiveFloatField( required = False )
  tolerance = PositiveFloatField( required = False )
  max_iterations = forms.IntegerField( required = False, min_value = 1 )
  threads = forms.IntegerField( required = False, min_value = 1 )
  probes = forms.IntegerField( required = False, min_value = 1 )
  threshold = PositiveFloatField( required = False )

  def clean( self ):
    cleaned = super().clean()
    cleaned['method'] = cleaned.get( 'method' ) or 'bridge'
    return cleaned

class OutputForm( forms.Form ):
  directory = forms.CharField( required = False )
  formats = ChoiceListField( FORMATS, required = False )

  def clean( self ):
    cleaned = super().clean()
    cleaned['formats'] = cleaned.get( 'formats' ) or list( DEFAULT_FORMATS )
    return cleaned

BLOCK_FORMS = {
  'run': RunForm,
  'domain': DomainForm,
  'plates.a1': A1PlateForm,
  'plates.a2': A2PlateForm,
  'constraint': ConstraintForm,
  'field': FieldForm,
  'solver': SolverForm,
  'output': OutputForm,
}


# ----------------------------------------------------
# where in the file a block or key lives

def find_line( text, block, key = None ):
  header = None
  pattern = None if key is None else re.compile( r'"?{}"?\s*='.format( re.escape( key ) ) )
  for number, raw in enumerate( text.splitlines(), 1 ):
    line = raw.strip()
    if ( line.startswith( '[' ) ):
      header = line.strip( '[]' ).strip()
      if ( key is None and header == block ):
        return number
      continue
    if ( pattern is not None and header == block and pattern.match( line ) ):
      return number
  return None

def toml_error_line( error ):
  lineno = getattr( error, 'lineno', None )
  if ( lineno ):
    return lineno
  found = re.search( r'line (\d+)', str( error ) )
  return int( found.group( 1 ) ) if found else None

def validate_block( name, data, text ):
  if ( not isinstance( data, dict ) ):
    raise ConfigError( "[{}] must be a table".format( name ), field = name, line = find_line( text, name ) )
  form_class = BLOCK_FORMS[name]
  unknown = sorted( set( data ) - set( form_class.base_fields ) )
  if ( unknown ):
    key = unknown[0]
    raise ConfigError( "unknown key '{}' in [{}]".format( key, name ), field = "{}.{}".format( name, key ),
      line = find_line( text, name, key ) )
  form = form_class( data = data )
  if ( not form.is_valid() ):
    key, errors = next( iter( form.errors.items() ) )
    raise ConfigError( "{}.{}: {}".format( name, key, errors[0] ), field = "{}.{}".format( name, key ),
      line = find_line( text, name, key ) or find_line( text, name ) )
  return { k: v for k, v in form.cleaned_data.items() if v not in ( None, '' ) }


# ----------------------------------------------------
# A validated run config.  Command-line flags go through override().

class CNRunConfig:

  def __init__( self, blocks, source = None, digest = None, text = '' ):
    self.run = blocks['run']
    self.domain = blocks['domain']
    self.plates = blocks['plates']
    self.constraint = blocks['constraint']
    self.field = blocks['field']
    self.solver = blocks['solver']
    self.output = blocks['output']
    self.source = source
    self.digest = digest
    self.text = text
    self.seed_override = None
    self.threads_override = None
    self.directory_override = None

  @classmethod
  def load( cls, path ):
    try:
      with open( path, 'rb' ) as source:
        raw = source.read()
    except OSError as error:
      raise ConfigError( "cannot read config {}: {}".format( path, error ) )
    try:
      text = raw.decode( 'utf-8' )
    except UnicodeDecodeError:
      raise ConfigError( "config {} is not UTF-8 text".format( path ) )
    return cls.from_text( text, os.path.abspath( path ), hashlib.sha256( raw ).hexdigest() )

  @classmethod
  def from_text( cls, text, source = None, digest = None ):
    try:
      data = tomllib.loads( text )
    except tomllib.TOMLDecodeError as error:
      raise ConfigError( "TOML syntax error: {}".format( error ), line = toml_error_line( error ) )

    allowed = set( BLOCK_FORMS ) - set( 'plates.' + p for p in PLATES ) | { 'plates' }
    unknown = sorted( set( data ) - allowed )
    if ( unknown ):
      raise ConfigError( "unknown block [{}]".format( unknown[0] ), field = unknown[0],
        line = find_line( text, unknown[0] ) )
    for name in REQUIRED_BLOCKS:
      if ( name not in data ):
        raise ConfigError( "the [{}] block is missing".format( name ), field = name )

    plates = data['plates']
    if ( not isinstance( plates, dict ) ):
      raise ConfigError( "[plates] must hold [plates.a1] and optionally [plates.a2]", field = 'plates' )
    unknown = sorted( set( plates ) - set( PLATES ) )
    if ( unknown ):
      raise ConfigError( "unknown plate '{}'".format( unknown[0] ), field = 'plates.' + unknown[0],
        line = find_line( text, 'plates.' + unknown[0] ) )
    if ( 'a1' not in plates ):
      raise ConfigError( "the [plates.a1] block is missing", field = 'plates.a1' )

    blocks = {
      'plates': { p: validate_block( 'plates.' + p, plates[p], text ) for p in PLATES if p in plates },
    }
    for name in ( 'run', 'domain', 'constraint', 'field', 'solver', 'output' ):
      blocks[name] = validate_block( name, data.get( name, {} ), text )

    if ( blocks['plates']['a1']['shape'] == 'ball_interior' and blocks['domain']['kind'] != 'ball' ):
      raise ConfigError( "a ball-interior A1 needs a ball domain", field = 'plates.a1.shape',
        line = find_line( text, 'plates.a1', 'shape' ) )
    if ( blocks['constraint']['shape'] == 'disc_series' and blocks['plates']['a1']['shape'] == 'ball_interior' ):
      raise ConfigError( "the disc-series constraint needs a disc plate", field = 'constraint.shape',
        line = find_line( text, 'constraint', 'shape' ) )

    digest = digest or hashlib.sha256( text.encode( 'utf-8' ) ).hexdigest()
    return cls( blocks, source, digest, text )

  def override( self, seed = None, threads = None, directory = None ):
    if ( seed is not None ):
      self.seed_override = int( seed )
    if ( threads is not None ):
      self.threads_override = int( threads )
    if ( directory is not None ):
      self.directory_override = directory
    return self

  @property
  def name( self ):
    if ( self.run.get( 'name' ) ):
      return self.run['name']
    if ( self.source ):
      return os.path.splitext( os.path.basename( self.source ) )[0]
    return 'run'

  @property
  def seed( self ):
    if ( self.seed_override is not None ):
      return self.seed_override
    return int( self.run.get( 'seed', 0 ) )

  @property
  def threads( self ):
    if ( self.threads_override is not None ):
      return self.threads_override
    return int( cnconf.setting( 'THREADS', self.solver.get( 'threads' ) ) )

  @property
  def directory( self ):
    if ( self.directory_override ):
      return self.directory_override
    if ( self.output.get( 'directory' ) ):
      return self.output['directory']
    return os.path.join( cnconf.setting( 'RUNS_DIR' ), self.name )

  @property
  def formats( self ):
    return self.output['formats']

  # paths inside a config are relative to the config file
  def resolve( self, path ):
    if ( os.path.isabs( path ) or not self.source ):
      return path
    return os.path.join( os.path.dirname( self.source ), path )

  def describe( self ):
    return {
      'source': self.source,
      'sha256': self.digest,
      'name': self.name,
      'seed': self.seed,
      'threads': self.threads,
      'blocks': {
        'run': self.run, 'domain': self.domain, 'plates': self.plates, 'constraint': self.constraint,
        'field': self.field, 'solver': self.solver, 'output': self.output,
      },
    }


# ----------------------------------------------------

MINIMAL = """
[domain]
kind = "halfspace"
alpha = 2.0

[plates.a1]
shape = "disc_series"
nodes = 40
levels = 2

[constraint]
shape = "disc_series"
"""

class CNConfigTest( TestCase ):

  def config_path( self, name ):
    return os.path.join( settings.CONDENSER_APP_PATH, 'configs', name )

  def test_shipped_configs_load( self ):
    for name in ( 'ball_q2.toml', 'disc_series.toml', 'halfspace_case2.toml' ):
      config = CNRunConfig.load( self.config_path( name ) )
      self.assertEqual( len( config.digest ), 64 )
      self.assertIn( config.solver['method'], ( 'bridge', 'direct' ) )
    ball = CNRunConfig.load( self.config_path( 'ball_q2.toml' ) )
    self.assertEqual( ball.domain['kind'], 'ball' )
    self.assertEqual( ball.constraint['q'], 2.0 )

  def test_defaults( self ):
    config = CNRunConfig.from_text( MINIMAL )
    self.assertEqual( config.domain['dimension'], 3 )
    self.assertEqual( config.field['case'], 'zero' )
    self.assertEqual( config.solver['method'], 'bridge' )
    self.assertEqual( config.formats, DEFAULT_FORMATS )
    self.assertEqual( config.seed, 0 )
    self.assertNotIn( 'a2', config.plates )

  def test_overrides( self ):
    config = CNRunConfig.from_text( MINIMAL ).override( seed = 7, threads = 2, directory = '/tmp/x' )
    self.assertEqual( config.seed, 7 )
    self.assertEqual( config.threads, 2 )
    self.assertEqual( config.directory, '/tmp/x' )

  def test_digest_is_stable( self ):
    self.assertEqual( CNRunConfig.from_text( MINIMAL ).digest, CNRunConfig.from_text( MINIMAL ).digest )
    self.assertNotEqual( CNRunConfig.from_text( MINIMAL ).digest,
      CNRunConfig.from_text( MINIMAL + "\n[run]\nseed = 1\n" ).digest )

  def test_unknown_key( self ):
    text = MINIMAL.replace( 'alpha = 2.0', 'alpha = 2.0\ncolour = "blue"' )
    with self.assertRaises( ConfigError ) as caught:
      CNRunConfig.from_text( text )
    self.assertEqual( caught.exception.field, 'domain.colour' )
    self.assertEqual( caught.exception.line, 5 )

  def test_unknown_block( self ):
    with self.assertRaises( ConfigError ) as caught:
      CNRunConfig.from_text( MINIMAL + "\n[extras]\nx = 1\n" )
    self.assertEqual( caught.exception.field, 'extras' )

  def test_alpha_out_of_range( self ):
    with self.assertRaises( ConfigError ) as caught:
      CNRunConfig.from_text( MINIMAL.replace( 'alpha = 2.0', 'alpha = 2.5' ) )
    self.assertEqual( caught.exception.field, 'domain.alpha' )
    self.assertEqual( caught.exception.line, 4 )
    self.assertEqual( caught.exception.exit_code, 2 )

  def test_syntax_error_line( self ):
    with self.assertRaises( ConfigError ) as caught:
      CNRunConfig.from_text( MINIMAL.replace( 'nodes = 40', 'nodes 40' ) )
    self.assertEqual( caught.exception.line, 8 )

  def test_missing_block( self ):
    with self.assertRaises( ConfigError ) as caught:
      CNRunConfig.from_text( MINIMAL.replace( '[constraint]\nshape = "disc_series"', '' ) )
    self.assertEqual( caught.exception.field, 'constraint' )

  def test_ball_needs_radius( self ):
    text = MINIMAL.replace( 'kind = "halfspace"', 'kind = "ball"' )
    with self.assertRaises( ConfigError ) as caught:
      CNRunConfig.from_text( text )
    self.assertEqual( caught.exception.field, 'domain.radius' )

  def test_q_must_exceed_one( self ):
    text = MINIMAL.replace(
      '[constraint]\nshape = "disc_series"', '[constraint]\nshape = "scaled_equilibrium"\nq = 1.0' )
    with self.assertRaises( ConfigError ) as caught:
      CNRunConfig.from_text( text )
    self.assertEqual( caught.exception.field, 'constraint.q' )

  def test_bad_disc( self ):
    text = MINIMAL.replace( 'shape = "disc_series"\nnodes = 40\nlevels = 2',
      'shape = "disc_stack"\nnodes = 40\ndiscs = [ { offset = 1.0, radius = -1.0 } ]' )
    with self.assertRaises( ConfigError ) as caught:
      CNRunConfig.from_text( text.replace( '[constraint]\nshape = "disc_series"',
        '[constraint]\nshape = "scaled_equilibrium"\nq = 2.0' ) )
    self.assertEqual( caught.exception.field, 'plates.a1.discs' )

  def test_case_two_needs_weights( self ):
    text = MINIMAL + '\n[field]\ncase = "case_two"\nsources = [ [ 0.5, 0.0, 0.0 ] ]\n'
    with self.assertRaises( ConfigError ) as caught:
      CNRunConfig.from_text( text )
    self.assertEqual( caught.exception.field, 'field.weights' )
