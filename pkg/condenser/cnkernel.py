# This file defines the kernels of the condenser problems and the dense
# kernel matrices we assemble over point clouds:
#
#   riesz   kappa_alpha(x, y) = |x - y|^(alpha - n)
#   green   g(x, y) = kappa_alpha(x, y) - U^{eps_y'}(x), eps_y' the balayage
#           of the unit mass at y onto the complement of D
#
# For alpha = 2 the Green kernel of the half-space (mirror image) and of
# the ball (Kelvin image) have closed forms.  Otherwise the Green matrix is
# built column by column from balayages of the nodes (see cnbalayage).
#
# The diagonal of a matrix is the kernel evaluated between a node and a
# copy of it moved by beta * cell_radius along the boundary's level
# surface.  For the Riesz kernel that is just kappa(beta * cell_radius).

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.linalg import LinAlgError, cho_factor
from scipy.spatial.distance import cdist

from django.test import TestCase

from condenser import cnconf
from condenser.cnerrors import (CloudMismatch, InfeasibleSpec, NotPositiveDefinite,
  OutsideDomain, SingularPair, UnsupportedDomain)
from condenser.cngeometry import A1, CNDisc, CNDomain, CNPlateSpec, CNPointCloud, discretize, kelvin_transform

logger = logging.getLogger( __name__ )

DUMP_MAGIC = b'CNKM'
DUMP_VERSION = 1


# ----------------------------------------------------
# pointwise kernels on coordinate arrays

def riesz_values( X, Y, alpha, n ):
  with np.errstate( divide = 'ignore' ):
    return cdist( np.atleast_2d( X ), np.atleast_2d( Y ) ) ** ( alpha - n )

def halfspace_green_values( X, Y, n ):
  X = np.atleast_2d( X )
  Y = np.atleast_2d( Y )
  mirrored = Y.copy()
  mirrored[:, 0] = -mirrored[:, 0]
  with np.errstate( divide = 'ignore', invalid = 'ignore' ):
    return cdist( X, Y ) ** ( 2.0 - n ) - cdist( X, mirrored ) ** ( 2.0 - n )

# y* = c + R^2 (y - c) / |y - c|^2
def kelvin_image( Y, centre, radius ):
  offsets = np.atleast_2d( Y ) - centre
  squared = np.sum( offsets ** 2, axis = 1 )
  with np.errstate( divide = 'ignore', invalid = 'ignore' ):
    return centre + offsets * ( radius ** 2 / squared )[:, None]

# Newtonian Green function of the ball B(c, R):
#   |x - y|^(2-n) - (R / |y - c|)^(n-2) |x - y*|^(2-n)
# and |x - c|^(2-n) - R^(2-n) when y is the centre
def ball_green_values( X, Y, centre, radius, n ):
  X = np.atleast_2d( X )
  Y = np.atleast_2d( Y )
  distances_to_centre = np.linalg.norm( Y - centre, axis = 1 )
  at_centre = distances_to_centre == 0.0
  with np.errstate( divide = 'ignore', invalid = 'ignore' ):
    direct = cdist( X, Y ) ** ( 2.0 - n )
    images = kelvin_image( Y[~at_centre], centre, radius )
    correction = np.empty_like( direct )
    factor = ( radius / distances_to_centre[~at_centre] ) ** ( n - 2.0 )
    correction[:, ~at_centre] = factor * cdist( X, images ) ** ( 2.0 - n )
    correction[:, at_centre] = radius ** ( 2.0 - n )
  return direct - correction


def check_pair( x, y ):
  x = np.asarray( x, dtype = float )
  y = np.asarray( y, dtype = float )
  if ( x.shape != y.shape ):
    raise CloudMismatch( "points have different dimensions" )
  if ( np.array_equal( x, y ) ):
    raise SingularPair( "the kernel is singular at x = y" )
  return x, y

def riesz_kernel( x, y, alpha, n ):
  x, y = check_pair( x, y )
  if ( not 0.0 < alpha < n ):
    raise InfeasibleSpec( "the Riesz kernel needs 0 < alpha < n", alpha = alpha, n = n )
  return float( np.linalg.norm( x - y ) ** ( alpha - n ) )

def green_kernel_halfspace( x, y, n = 3 ):
  x, y = check_pair( x, y )
  if ( x[0] <= 0.0 or y[0] <= 0.0 ):
    raise OutsideDomain( "Green kernel arguments must lie in x1 > 0" )
  return float( halfspace_green_values( x, y, n )[0, 0] )

def green_kernel_ball_newtonian( x, y, domain, n = None ):
  x, y = check_pair( x, y )
  n = domain.dimension if n is None else n
  if ( not domain.is_ball() ):
    raise UnsupportedDomain( "this Green kernel belongs to a ball" )
  if ( not np.all( domain.contains( np.vstack( ( x, y ) ) ) ) ):
    raise OutsideDomain( "Green kernel arguments must lie inside the ball" )
  return float( ball_green_values( x, y, domain.center, domain.radius, n )[0, 0] )

# g(x, y) = kappa(x, y) - U^{eps_y'}(x), where bal_oracle(y) returns the
# balayage of the unit mass at y as a measure on the oracle's A2 nodes
def green_kernel_numeric( x, y, domain, alpha, bal_oracle ):
  x, y = check_pair( x, y )
  if ( not np.all( domain.contains( np.vstack( ( x, y ) ) ) ) ):
    raise OutsideDomain( "Green kernel arguments must lie in D" )
  swept = bal_oracle( y )
  support = swept.support()
  n = domain.dimension
  direct = riesz_kernel( x, y, alpha, n )
  sources = swept.cloud.points[support]
  return direct - float( riesz_values( x, sources, alpha, n )[0] @ swept.weights[support] )


# ----------------------------------------------------
# kernel kinds

class CNKernelKind:

  RIESZ = 'riesz'
  GREEN = 'green'

  def __init__( self, name, alpha, dimension, domain = None ):
    if ( name == CNKernelKind.RIESZ ):
      if ( not 0.0 < alpha < dimension ):
        raise InfeasibleSpec( "the Riesz kernel needs 0 < alpha < n", alpha = alpha, n = dimension )
    elif ( name == CNKernelKind.GREEN ):
      if ( domain is None ):
        raise UnsupportedDomain( "a Green kernel needs its domain" )
      if ( not 0.0 < alpha <= 2.0 ):
        raise InfeasibleSpec( "the Green kernel needs 0 < alpha <= 2", alpha = alpha )
    else:
      raise InfeasibleSpec( "unknown kernel kind '{}'".format( name ) )
    self.name = name
    self.alpha = float( alpha )
    self.dimension = int( dimension )
    self.domain = domain

  @classmethod
  def riesz( cls, alpha, dimension ):
    return cls( CNKernelKind.RIESZ, alpha, dimension )

  @classmethod
  def green( cls, domain, alpha = None ):
    return cls( CNKernelKind.GREEN, domain.alpha if alpha is None else alpha, domain.dimension, domain )

  def is_riesz( self ):
    return self.name == CNKernelKind.RIESZ

  def is_green( self ):
    return self.name == CNKernelKind.GREEN

  def has_closed_form( self ):
    return self.is_riesz() or self.alpha == 2.0

  def matching_riesz( self ):
    return CNKernelKind.riesz( self.alpha, self.dimension )

  def pair_values( self, X, Y ):
    if ( self.is_riesz() ):
      return riesz_values( X, Y, self.alpha, self.dimension )
    if ( not self.has_closed_form() ):
      raise UnsupportedDomain( "the alpha-Green kernel for alpha < 2 has no closed form here; "
        "it is assembled from balayages" )
    if ( self.domain.is_halfspace() ):
      return halfspace_green_values( X, Y, self.dimension )
    return ball_green_values( X, Y, self.domain.center, self.domain.radius, self.dimension )

  # copies of the points moved by 'separation' along the level surface of
  # the distance to the boundary of D
  def displaced( self, points, separation ):
    displaced = np.array( points, dtype = float, copy = True )
    if ( self.is_riesz() or self.domain.is_halfspace() ):
      displaced[:, 1] += separation
      return displaced
    domain = self.domain
    offsets = points - domain.center
    lengths = np.linalg.norm( offsets, axis = 1 )
    tangents = domain.tangents( points )
    for i in range( len( points ) ):
      if ( lengths[i] == 0.0 ):
        displaced[i] = points[i] + separation[i] * tangents[i]
        continue
      angle = 2.0 * math.asin( min( 1.0, separation[i] / ( 2.0 * lengths[i] ) ) )
      radial = offsets[i] / lengths[i]
      displaced[i] = domain.center + lengths[i] * ( math.cos( angle ) * radial + math.sin( angle ) * tangents[i] )
    return displaced

  def self_values( self, points, separation ):
    if ( self.is_riesz() ):
      return separation ** ( self.alpha - self.dimension )
    moved = self.displaced( points, separation )
    return np.array( [ self.pair_values( p, q )[0, 0] for p, q in zip( points, moved ) ] )

  def describe( self ):
    info = { 'kind': self.name, 'alpha': self.alpha, 'dimension': self.dimension }
    if ( self.domain is not None ):
      info['domain'] = self.domain.describe()
    return info

  @classmethod
  def from_description( cls, info ):
    if ( info['kind'] == CNKernelKind.RIESZ ):
      return cls.riesz( info['alpha'], info['dimension'] )
    domain = info['domain']
    return cls.green( CNDomain( domain['kind'], domain['dimension'], domain['alpha'],
      domain.get( 'center' ), domain.get( 'radius' ) ), info['alpha'] )

  def __str__( self ):
    if ( self.is_riesz() ):
      return "riesz(alpha={}, n={})".format( self.alpha, self.dimension )
    return "green({}, alpha={}, n={})".format( self.domain.kind, self.alpha, self.dimension )


# ----------------------------------------------------
# A dense symmetric kernel matrix over the nodes 'indices' of a cloud
# (all nodes for Riesz, the A1 nodes for Green).  Treat it as immutable.
# A Green matrix built by balayage also keeps the sweep of every column's
# unit mass ('swept_columns', A2 rows by A1 columns) and the Riesz matrix
# it was swept with.

class CNKernelMatrix:

  def __init__( self, values, kind, indices, cloud = None, diagonal_rule = None ):
    self.values = values
    self.kind = kind
    self.indices = np.asarray( indices, dtype = int )
    self.cloud = cloud
    self.diagonal_rule = diagonal_rule or {}
    self.swept_columns = None
    self.swept_by = None
    self._factor = None

  def __len__( self ):
    return len( self.indices )

  def __repr__( self ):
    return "CNKernelMatrix({}, {} nodes)".format( self.kind, len( self ) )

  @property
  def scale( self ):
    return float( np.max( np.diag( self.values ) ) )

  # row/column positions of cloud nodes in this matrix
  def positions( self, nodes ):
    nodes = np.asarray( nodes, dtype = int )
    where = np.searchsorted( self.indices, nodes )
    if ( np.any( where >= len( self.indices ) ) or np.any( self.indices[np.minimum( where, len( self.indices ) - 1 )] != nodes ) ):
      raise CloudMismatch( "nodes are not covered by this kernel matrix" )
    return where

  def block( self, rows, cols ):
    return self.values[np.ix_( self.positions( rows ), self.positions( cols ) )]

  def factor( self ):
    if ( self._factor is None ):
      try:
        self._factor = cho_factor( self.values )
      except LinAlgError:
        raise NotPositiveDefinite( "kernel matrix is not numerically positive definite",
          kind = str( self.kind ), nodes = len( self ) )
    return self._factor

  def is_positive_definite( self ):
    try:
      self.factor()
    except NotPositiveDefinite:
      return False
    return True

  # row-major little-endian float64 after a header holding the node count
  # and a JSON descriptor of the kernel and diagonal rule
  def dump( self, path ):
    descriptor = json.dumps( {
      'kernel': self.kind.describe(),
      'diagonal_rule': self.diagonal_rule,
    }, sort_keys = True ).encode( 'utf-8' )
    with open( path, 'wb' ) as out:
      out.write( DUMP_MAGIC )
      out.write( struct.pack( '<IQI', DUMP_VERSION, len( self ), len( descriptor ) ) )
      out.write( descriptor )
      out.write( self.indices.astype( '<i8' ).tobytes() )
      out.write( np.ascontiguousarray( self.values ).astype( '<f8' ).tobytes() )

  @classmethod
  def load( cls, path, cloud = None ):
    with open( path, 'rb' ) as source:
      if ( source.read( 4 ) != DUMP_MAGIC ):
        raise CloudMismatch( "not a kernel matrix dump", path = path )
      version, count, length = struct.unpack( '<IQI', source.read( 16 ) )
      descriptor = json.loads( source.read( length ).decode( 'utf-8' ) )
      indices = np.frombuffer( source.read( 8 * count ), dtype = '<i8' ).astype( int )
      values = np.frombuffer( source.read( 8 * count * count ), dtype = '<f8' ).reshape( count, count )
    return cls( values.copy(), CNKernelKind.from_description( descriptor['kernel'] ), indices,
      cloud, descriptor['diagonal_rule'] )


# ----------------------------------------------------
# assembly

def symmetrize( values ):
  upper = np.triu( values )
  return upper + np.triu( values, 1 ).T

# evaluate rows in chunks, 'threads' chunks at a time
def fill_rows( kind, points, threads ):
  size = len( points )
  values = np.empty( ( size, size ) )
  chunk = max( 1, int( math.ceil( size / float( 4 * max( 1, threads ) ) ) ) )
  starts = list( range( 0, size, chunk ) )

  def fill( start ):
    stop = min( size, start + chunk )
    values[start:stop] = kind.pair_values( points[start:stop], points )

  if ( threads > 1 and len( starts ) > 1 ):
    with ThreadPoolExecutor( max_workers = threads ) as pool:
      list( pool.map( fill, starts ) )
  else:
    for start in starts:
      fill( start )
  return values

def assemble( kind, cloud, beta = None, threads = None, method = None, tolerance = None ):
  if ( len( cloud ) == 0 ):
    raise CloudMismatch( "cannot assemble a kernel over an empty cloud" )
  if ( cloud.dimension != kind.dimension ):
    raise CloudMismatch( "kernel and cloud dimensions differ", kernel = kind.dimension, cloud = cloud.dimension )
  beta = cnconf.setting( 'BETA', beta )
  threads = int( cnconf.setting( 'THREADS', threads ) )
  method = method or ( 'closed' if kind.has_closed_form() else 'balayage' )

  if ( kind.is_green() and method == 'balayage' ):
    from condenser.cnbalayage import assemble_green_by_balayage
    return assemble_green_by_balayage( kind, cloud, beta = beta, threads = threads, tolerance = tolerance )

  indices = np.arange( len( cloud ) ) if kind.is_riesz() else cloud.a1
  if ( len( indices ) == 0 ):
    raise CloudMismatch( "the Green kernel lives on A1 nodes and the cloud has none" )
  points = cloud.points[indices]
  logger.debug( "assembling %s over %d nodes (%d threads)", kind, len( indices ), threads )
  values = fill_rows( kind, points, threads )
  np.fill_diagonal( values, kind.self_values( points, beta * cloud.cell_radius[indices] ) )
  values = symmetrize( values )
  if ( not np.all( np.isfinite( values ) ) ):
    bad = np.argwhere( ~np.isfinite( values ) )[0]
    raise SingularPair( "two distinct nodes coincide", nodes = ( int( indices[bad[0]] ), int( indices[bad[1]] ) ) )
  return CNKernelMatrix( values, kind, indices, cloud, { 'rule': 'separation', 'beta': beta } )


# ----------------------------------------------------

class CNKernelTest( TestCase ):

  def setUp( self ):
    self.halfspace = CNDomain.halfspace( 3, 2.0 )
    self.ball = CNDomain.ball( [ 0.0, 0.0, 0.0 ], 1.0, 2.0 )

  def test_riesz_kernel( self ):
    self.assertAlmostEqual( riesz_kernel( [ 0, 0, 0 ], [ 1, 0, 0 ], 2.0, 3 ), 1.0 )
    self.assertAlmostEqual( riesz_kernel( [ 0, 0, 0 ], [ 2, 0, 0 ], 2.0, 3 ), 0.5 )
    self.assertAlmostEqual( riesz_kernel( [ 0, 0, 0 ], [ 2, 0, 0 ], 1.0, 3 ), 0.25 )
    with self.assertRaises( SingularPair ):
      riesz_kernel( [ 1, 2, 3 ], [ 1, 2, 3 ], 2.0, 3 )

  def test_green_halfspace( self ):
    self.assertAlmostEqual( green_kernel_halfspace( [ 1, 0, 0 ], [ 2, 0, 0 ] ), 2.0 / 3.0 )
    self.assertLess( green_kernel_halfspace( [ 1e-7, 0, 0 ], [ 1, 0, 0 ] ), 1e-6 )
    x, y = [ 0.3, 0.2, -1.0 ], [ 1.7, 0.4, 0.5 ]
    self.assertAlmostEqual( green_kernel_halfspace( x, y ), green_kernel_halfspace( y, x ), places = 14 )
    with self.assertRaises( OutsideDomain ):
      green_kernel_halfspace( [ -1, 0, 0 ], [ 1, 0, 0 ] )

  def test_green_ball_at_centre( self ):
    self.assertAlmostEqual( green_kernel_ball_newtonian( [ 0, 0, 0 ], [ 0.5, 0, 0 ], self.ball ), 1.0 )
    self.assertAlmostEqual( green_kernel_ball_newtonian( [ 0, 0.25, 0 ], [ 0, 0, 0 ], self.ball ), 3.0 )
    self.assertLess( green_kernel_ball_newtonian( [ 0.9999, 0, 0 ], [ 0, 0, 0.9999 ], self.ball ), 1e-3 )

  def test_green_below_riesz( self ):
    rng = np.random.default_rng( 1 )
    for _ in range( 50 ):
      x = rng.uniform( -0.55, 0.55, 3 )
      y = rng.uniform( -0.55, 0.55, 3 )
      g = green_kernel_ball_newtonian( x, y, self.ball )
      self.assertGreater( g, 0.0 )
      self.assertLess( g, riesz_kernel( x, y, 2.0, 3 ) )
      self.assertAlmostEqual( g, green_kernel_ball_newtonian( y, x, self.ball ), places = 10 )
      h = green_kernel_halfspace( np.abs( x ) + 0.01, np.abs( y ) + 0.01 )
      self.assertLess( h, riesz_kernel( np.abs( x ), np.abs( y ), 2.0, 3 ) )

  def test_boundary_vanishing( self ):
    x = [ 1e-3, 0.0, 0.0 ]
    y = [ 1.0, 0.5, 0.0 ]
    self.assertLessEqual( green_kernel_halfspace( x, y ), 1e-2 * riesz_kernel( x, y, 2.0, 3 ) )
    x = [ 0.0, 0.999, 0.0 ]
    y = [ 0.2, 0.1, 0.3 ]
    self.assertLessEqual( green_kernel_ball_newtonian( x, y, self.ball ), 1e-2 * riesz_kernel( x, y, 2.0, 3 ) )

  def test_two_node_assembly( self ):
    cloud = CNPointCloud( [ [ 1.0, 0.0, 0.0 ], [ 2.0, 0.0, 0.0 ] ], [ 0.5, 0.5 ], [ A1, A1 ] )
    matrix = assemble( CNKernelKind.riesz( 2.0, 3 ), cloud, beta = 0.5 )
    self.assertEqual( matrix.values[0, 1], 1.0 )
    self.assertEqual( matrix.values[1, 0], 1.0 )
    self.assertAlmostEqual( matrix.values[0, 0], 4.0 )

  def test_symmetry_and_definiteness( self ):
    cloud = discretize( self.halfspace, CNPlateSpec.disc_series( 3, 100 ), seed = 2 )
    riesz = assemble( CNKernelKind.riesz( 2.0, 3 ), cloud )
    green = assemble( CNKernelKind.green( self.halfspace ), cloud )
    self.assertTrue( np.array_equal( riesz.values, riesz.values.T ) )
    self.assertTrue( np.array_equal( green.values, green.values.T ) )
    self.assertTrue( np.all( riesz.values > 0.0 ) )
    self.assertTrue( np.all( green.values >= 0.0 ) )
    self.assertTrue( np.all( green.values < riesz.block( cloud.a1, cloud.a1 ) ) )
    self.assertTrue( riesz.is_positive_definite() )
    self.assertTrue( green.is_positive_definite() )

  def test_ball_green_diagonal_stays_inside( self ):
    cloud = discretize( self.ball, CNPlateSpec.ball_interior( 120 ), seed = 4 )
    green = assemble( CNKernelKind.green( self.ball ), cloud )
    self.assertTrue( np.all( np.diag( green.values ) > 0.0 ) )
    self.assertTrue( green.is_positive_definite() )

  def test_threads_do_not_change_values( self ):
    cloud = discretize( self.ball, CNPlateSpec.ball_interior( 90 ), seed = 6 )
    kind = CNKernelKind.riesz( 1.5, 3 )
    self.assertTrue( np.array_equal( assemble( kind, cloud, threads = 1 ).values,
      assemble( kind, cloud, threads = 3 ).values ) )

  def test_kelvin_transform_keeps_riesz_energy( self ):
    spec = CNPlateSpec.disc_stack( [ CNDisc( 0.4, 0.5, [ 1.0, 0.0 ] ) ], 60 )
    cloud = discretize( self.halfspace, spec )
    weights = np.random.default_rng( 3 ).uniform( 0.5, 1.5, 60 )
    kind = CNKernelKind.riesz( 2.0, 3 )
    before = weights @ assemble( kind, cloud ).values @ weights
    image, image_weights = kelvin_transform( cloud, weights, [ -2.0, 0.0, 0.0 ], 2.0, 2.0 )
    after = image_weights @ assemble( kind, image ).values @ image_weights
    self.assertAlmostEqual( after / before, 1.0, places = 10 )

  def test_dump_and_load( self ):
    import os
    import tempfile
    cloud = discretize( self.halfspace, CNPlateSpec.disc_series( 2, 20 ) )
    green = assemble( CNKernelKind.green( self.halfspace ), cloud )
    with tempfile.TemporaryDirectory() as tmp:
      path = os.path.join( tmp, 'green.bin' )
      green.dump( path )
      self.assertEqual( os.path.getsize( path ) - 4 - 16 - 8 * 40,
        8 * 40 * 40 + len( json.dumps( { 'kernel': green.kind.describe(),
          'diagonal_rule': green.diagonal_rule }, sort_keys = True ) ) )
      loaded = CNKernelMatrix.load( path )
    self.assertTrue( np.array_equal( loaded.values, green.values ) )
    self.assertTrue( loaded.kind.is_green() )
    self.assertEqual( loaded.kind.domain.kind, CNDomain.HALFSPACE )
