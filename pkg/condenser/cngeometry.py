# This file defines the geometry of a generalized condenser: the domain D
# (an open half-space {x1 > 0} or an open ball), the plates A1 (inside D)
# and A2 (the complement of D), and the deterministic point clouds that
# discretize them.
#
# Every cloud node carries a quadrature cell: 'cell_radius' (half the
# distance to the nearest node on the same plate) feeds the diagonal rule
# of the kernel matrices, and 'cell_measure' (area or volume of the cell
# taken from the sampling map) lets us check that the cells tile the plate.

import hashlib
import logging
import math

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.optimize import brentq
from scipy.spatial import cKDTree
from scipy.special import gamma

from django.test import TestCase

from condenser import cnconf
from condenser.cnerrors import DimensionMismatch, InfeasibleSpec, UnsupportedDomain

logger = logging.getLogger( __name__ )

A1 = 1
A2 = 2
PLATE_NAMES = { A1: 'A1', A2: 'A2' }

GOLDEN_ANGLE = math.pi * ( 3.0 - math.sqrt( 5.0 ) )
MIN_CELL_RADIUS = 1e-9


# ----------------------------------------------------
# measure of the unit ball / sphere in R^dim

def ball_volume( dim, radius = 1.0 ):
  return math.pi ** ( dim / 2.0 ) / gamma( dim / 2.0 + 1.0 ) * radius ** dim

def sphere_area( dim, radius = 1.0 ):
  return dim * ball_volume( dim ) * radius ** ( dim - 1 )


# a random orthogonal matrix, so that every shell of a sampled ball gets
# its own orientation
def random_rotation( dim, rng ):
  q, r = np.linalg.qr( rng.standard_normal( ( dim, dim ) ) )
  return q * np.sign( np.diag( r ) )

# 'count' unit vectors in R^dim, spread as evenly as we know how: equal
# angles on the circle, a Fibonacci lattice on the 2-sphere.  Higher
# dimensions fall back to normalized gaussian directions.
def sphere_directions( count, dim, rng ):
  if ( count <= 0 ):
    return np.zeros( ( 0, dim ) )
  if ( dim == 2 ):
    phase = rng.uniform( 0.0, 2.0 * math.pi )
    angles = phase + 2.0 * math.pi * np.arange( count ) / count
    return np.column_stack( ( np.cos( angles ), np.sin( angles ) ) )
  if ( dim == 3 ):
    i = np.arange( count ) + 0.5
    z = 1.0 - 2.0 * i / count
    rho = np.sqrt( np.clip( 1.0 - z * z, 0.0, None ) )
    phi = i * GOLDEN_ANGLE
    directions = np.column_stack( ( rho * np.cos( phi ), rho * np.sin( phi ), z ) )
    return directions @ random_rotation( 3, rng ).T
  directions = rng.standard_normal( ( count, dim ) )
  return directions / np.linalg.norm( directions, axis = 1 )[:, None]

# the lower half (x1 < 0) of a Fibonacci lattice with twice the points,
# turned about the x1 axis by a random angle
def hemisphere_directions( count, dim, rng ):
  if ( count <= 0 ):
    return np.zeros( ( 0, dim ) )
  if ( dim == 3 ):
    i = np.arange( count, 2 * count ) + 0.5
    z = 1.0 - i / count
    rho = np.sqrt( np.clip( 1.0 - z * z, 0.0, None ) )
    phi = rng.uniform( 0.0, 2.0 * math.pi ) + i * GOLDEN_ANGLE
    return np.column_stack( ( z, rho * np.cos( phi ), rho * np.sin( phi ) ) )
  directions = sphere_directions( count, dim, rng )
  directions[:, 0] = -np.abs( directions[:, 0] )
  return directions

# splits 'count' into integers proportional to 'shares' (largest remainder)
def apportion( count, shares ):
  shares = np.asarray( shares, dtype = float )
  raw = count * shares / shares.sum()
  counts = np.floor( raw ).astype( int )
  counts[np.argsort( counts - raw, kind = 'stable' )[:count - int( counts.sum() )]] += 1
  return counts


# ----------------------------------------------------
# Radial spacing of a sampled ball or shell inner < |x| < outer of R^dim.
# The local spacing is
#
#   h(r) = h0 + growth * max(r - inner - flat, 0)
#
# constant over the first 'flat' of the shell and growing linearly past
# it, so far out every decade of radius gets the same number of points.
# h0 is solved for so that the shell holds 'count' points.  In the plane
# every point is its own ring (a sunflower); in higher dimensions the
# points sit on shells one spacing apart, each shell holding its share of
# the count.  'half' keeps the half x1 < 0 only.

class CNRadialGrading:

  SAMPLES = 2048

  def __init__( self, dim, inner, outer, count, flat = None, growth = 0.0, half = False ):
    if ( not 0.0 <= inner < outer ):
      raise InfeasibleSpec( "a radial grading needs 0 <= inner < outer", inner = inner, outer = outer )
    if ( count < 1 ):
      raise InfeasibleSpec( "a radial grading needs at least one point", count = count )
    if ( growth < 0.0 ):
      raise InfeasibleSpec( "the spacing growth must be nonnegative", growth = growth )
    self.dim = int( dim )
    self.inner = float( inner )
    self.outer = float( outer )
    self.count = int( count )
    reach = self.outer - self.inner
    self.flat = reach if flat is None else min( max( float( flat ), 0.0 ), reach )
    self.growth = float( growth )
    self.half = bool( half )
    self.radii = self.grid()
    self.spacing = self.solve_spacing()
    h = self.local_spacing( self.radii )
    self.cumulative = cumulative_trapezoid( self.shell_density( self.radii ) / h ** self.dim, self.radii,
      initial = 0.0 )
    self.steps = cumulative_trapezoid( 1.0 / h, self.radii, initial = 0.0 )

  def __repr__( self ):
    return "CNRadialGrading(dim={}, {:.4g} < r < {:.4g}, {} points, h0={:.4g}, growth={})".format(
      self.dim, self.inner, self.outer, self.count, self.spacing, self.growth )

  # linear over the flat part, geometric past it
  def grid( self ):
    start = self.inner + self.flat
    radii = [ np.linspace( self.inner, start, self.SAMPLES ) ]
    if ( start < self.outer ):
      reach = self.outer - start
      radii.append( start + np.geomspace( 1e-6 * reach, reach, self.SAMPLES ) )
    return np.unique( np.concatenate( radii ) )

  def measure( self, r ):
    share = 0.5 if self.half else 1.0
    return share * ball_volume( self.dim ) * ( np.asarray( r ) ** self.dim - self.inner ** self.dim )

  # d measure / dr
  def shell_density( self, r ):
    share = 0.5 if self.half else 1.0
    return share * sphere_area( self.dim, 1.0 ) * r ** ( self.dim - 1 )

  def local_spacing( self, r, h0 = None ):
    h0 = self.spacing if h0 is None else h0
    return h0 + self.growth * np.maximum( r - self.inner - self.flat, 0.0 )

  def points_for( self, h0 ):
    return float( trapezoid( self.shell_density( self.radii ) / self.local_spacing( self.radii, h0 ) ** self.dim,
      self.radii ) )

  def solve_spacing( self ):
    uniform = ( float( self.measure( self.outer ) ) / self.count ) ** ( 1.0 / self.dim )
    if ( self.growth == 0.0 ):
      return uniform
    low = 1e-6 * uniform
    if ( self.points_for( low ) < self.count ):
      raise InfeasibleSpec( "the shell cannot hold {} points with spacing growth {}".format( self.count, self.growth ),
        flat = self.flat, outer = self.outer )
    return brentq( lambda h0: math.log( self.points_for( h0 ) / self.count ), low, uniform, rtol = 1e-10 )

  def radius_at( self, fraction ):
    return np.interp( fraction * self.cumulative[-1], self.cumulative, self.radii )

  def fraction_at( self, r ):
    return np.interp( r, self.radii, self.cumulative ) / self.cumulative[-1]

  def radius_at_step( self, step ):
    return np.interp( step, self.steps, self.radii )

  # points and their cell measures; the cells tile the shell exactly
  def sample( self, rng ):
    if ( self.dim == 2 and not self.half ):
      return self.sunflower( rng )
    return self.shells( rng )

  def sunflower( self, rng ):
    i = np.arange( self.count )
    r = self.radius_at( ( i + 0.5 ) / self.count )
    edges = self.radius_at( np.arange( self.count + 1 ) / self.count )
    edges[0], edges[-1] = self.inner, self.outer
    theta = rng.uniform( 0.0, 2.0 * math.pi ) + i * GOLDEN_ANGLE
    points = np.column_stack( ( r * np.cos( theta ), r * np.sin( theta ) ) )
    return points, np.diff( self.measure( edges ) )

  def shells( self, rng ):
    total = float( self.steps[-1] )
    layers = max( 1, int( round( total ) ) )
    bounds = self.radius_at_step( np.linspace( 0.0, total, layers + 1 ) )
    bounds[0], bounds[-1] = self.inner, self.outer
    centres = self.radius_at_step( ( np.arange( layers ) + 0.5 ) * total / layers )
    counts = apportion( self.count, np.diff( self.fraction_at( bounds ) ) )
    directions = hemisphere_directions if self.half else sphere_directions
    points, measures = [], []
    carried = 0.0
    for r, low, high, n_j in zip( centres, bounds[:-1], bounds[1:], counts ):
      # a shell too thin for a point of its own hands its measure on
      carried += float( self.measure( high ) - self.measure( low ) )
      if ( n_j == 0 ):
        continue
      points.append( r * directions( n_j, self.dim, rng ) )
      measures.append( np.full( n_j, carried / n_j ) )
      carried = 0.0
    measures[-1] += carried / len( measures[-1] )
    return np.vstack( points ), np.concatenate( measures )

# how many points a shell holds at spacing h0 near its inner radius
def shell_count( dim, inner, outer, spacing, flat = None, growth = 0.0, half = False ):
  if ( not spacing > 0.0 ):
    raise InfeasibleSpec( "the spacing must be positive", spacing = spacing )
  grading = CNRadialGrading( dim, inner, outer, 1, flat = flat, growth = growth, half = half )
  return max( 1, int( math.ceil( grading.points_for( spacing ) ) ) )


# ----------------------------------------------------
# The domain D.  Both built-in domains have unbounded complements with
# nonempty interior, which is never alpha-thin at infinity.

class CNDomain:

  HALFSPACE = 'halfspace'
  BALL = 'ball'
  KINDS = ( HALFSPACE, BALL )

  def __init__( self, kind, dimension = 3, alpha = 2.0, center = None, radius = None ):
    if ( kind not in CNDomain.KINDS ):
      raise InfeasibleSpec( "unknown domain kind '{}'".format( kind ) )
    if ( int( dimension ) != dimension or dimension < 3 ):
      raise DimensionMismatch( "the dimension must be an integer >= 3", dimension = dimension )
    if ( not 0.0 < alpha <= 2.0 ):
      raise InfeasibleSpec( "alpha must lie in (0, 2]", alpha = alpha )
    self.kind = kind
    self.dimension = int( dimension )
    self.alpha = float( alpha )
    self.center = None
    self.radius = None
    if ( kind == CNDomain.BALL ):
      center = np.zeros( self.dimension ) if center is None else np.asarray( center, dtype = float )
      if ( center.shape != ( self.dimension, ) ):
        raise DimensionMismatch( "ball centre has the wrong dimension", expected = self.dimension )
      if ( radius is None or radius <= 0.0 ):
        raise InfeasibleSpec( "ball radius must be positive", radius = radius )
      self.center = center
      self.radius = float( radius )

  @classmethod
  def halfspace( cls, dimension = 3, alpha = 2.0 ):
    return cls( CNDomain.HALFSPACE, dimension, alpha )

  @classmethod
  def ball( cls, center, radius, alpha = 2.0 ):
    return cls( CNDomain.BALL, len( center ), alpha, center, radius )

  def __str__( self ):
    if ( self.is_halfspace() ):
      return "half-space x1 > 0 in R^{} (alpha={})".format( self.dimension, self.alpha )
    return "ball B({}, {}) in R^{} (alpha={})".format(
      list( self.center ), self.radius, self.dimension, self.alpha )

  def is_halfspace( self ):
    return self.kind == CNDomain.HALFSPACE

  def is_ball( self ):
    return self.kind == CNDomain.BALL

  @property
  def complement_thin_at_infinity( self ):
    return False

  def check_points( self, points ):
    points = np.atleast_2d( np.asarray( points, dtype = float ) )
    if ( points.shape[1] != self.dimension ):
      raise DimensionMismatch( "points do not live in R^{}".format( self.dimension ),
        got = points.shape[1] )
    return points

  # strict interior of D
  def contains( self, points ):
    points = self.check_points( points )
    if ( self.is_halfspace() ):
      return points[:, 0] > 0.0
    return np.linalg.norm( points - self.center, axis = 1 ) < self.radius

  # the closed complement, with a little slack for points put on the
  # boundary sphere by floating point arithmetic
  def in_complement( self, points, tolerance = 1e-12 ):
    points = self.check_points( points )
    if ( self.is_halfspace() ):
      return points[:, 0] <= 0.0
    return np.linalg.norm( points - self.center, axis = 1 ) >= self.radius * ( 1.0 - tolerance )

  def distance_to_boundary( self, points ):
    points = self.check_points( points )
    if ( self.is_halfspace() ):
      return np.abs( points[:, 0] )
    return np.abs( self.radius - np.linalg.norm( points - self.center, axis = 1 ) )

  # unit vectors tangent to the level surfaces of the distance to the
  # boundary: a lateral axis for the half-space, a direction orthogonal to
  # the radius vector for the ball
  def tangents( self, points ):
    points = self.check_points( points )
    tangents = np.zeros_like( points )
    if ( self.is_halfspace() ):
      tangents[:, 1] = 1.0
      return tangents
    v = points - self.center
    norms = np.linalg.norm( v, axis = 1 )
    for i in range( len( points ) ):
      if ( norms[i] == 0.0 ):
        tangents[i, 1] = 1.0
        continue
      k = int( np.argmin( np.abs( v[i] ) ) )
      t = -v[i] * ( v[i, k] / norms[i] ** 2 )
      t[k] += 1.0
      tangents[i] = t / np.linalg.norm( t )
    return tangents

  def reflect( self, points ):
    if ( not self.is_halfspace() ):
      raise UnsupportedDomain( "reflection across the boundary is defined for the half-space only; "
        "the ball uses its Kelvin image" )
    reflected = np.array( points, dtype = float, copy = True )
    reflected[..., 0] = -reflected[..., 0]
    return reflected

  def describe( self ):
    info = {
      'kind': self.kind,
      'dimension': self.dimension,
      'alpha': self.alpha,
      'complement_thin_at_infinity': self.complement_thin_at_infinity,
    }
    if ( self.is_ball() ):
      info['center'] = [ float( x ) for x in self.center ]
      info['radius'] = self.radius
    return info


def reflect_across_boundary( domain, point ):
  return domain.reflect( point )


# ----------------------------------------------------
# A flat disc in the hyperplane {x1 = offset}, spanned by the x2 and x3
# axes.  'center' holds the remaining n-1 coordinates of its centre.

class CNDisc:

  def __init__( self, offset, radius, center = None ):
    if ( radius <= 0.0 ):
      raise InfeasibleSpec( "disc radius must be positive", radius = radius )
    self.offset = float( offset )
    self.radius = float( radius )
    self.center = None if center is None else np.asarray( center, dtype = float )

  def lateral_center( self, dimension ):
    if ( self.center is None ):
      return np.zeros( dimension - 1 )
    if ( self.center.shape != ( dimension - 1, ) ):
      raise DimensionMismatch( "disc centre needs {} lateral coordinates".format( dimension - 1 ),
        got = len( self.center ) )
    return self.center

  # smallest distance from the closed disc to the boundary of D, negative
  # if the disc leaves D
  def clearance( self, domain ):
    if ( domain.is_halfspace() ):
      return self.offset
    centre = self.lateral_center( domain.dimension )
    along = self.offset - domain.center[0]
    lateral = np.linalg.norm( centre - domain.center[1:] ) + self.radius
    return domain.radius - math.hypot( along, lateral )

  def __repr__( self ):
    return "CNDisc(offset={}, radius={})".format( self.offset, self.radius )


# ----------------------------------------------------
# What to build for one plate.

class CNPlateSpec:

  DISC_STACK = 'disc_stack'
  BALL_INTERIOR = 'ball_interior'
  ANNULUS = 'annulus'
  COMPLEMENT_SHELL = 'complement_shell'
  CUSTOM = 'custom'
  SHAPES = ( DISC_STACK, BALL_INTERIOR, ANNULUS, COMPLEMENT_SHELL, CUSTOM )

  def __init__( self, which, shape, node_count, boundary_margin = 0.0, **options ):
    if ( which not in ( A1, A2 ) ):
      raise InfeasibleSpec( "a plate is A1 or A2", which = which )
    if ( shape not in CNPlateSpec.SHAPES ):
      raise InfeasibleSpec( "unknown plate shape '{}'".format( shape ) )
    if ( node_count < 1 ):
      raise InfeasibleSpec( "a plate needs at least one node", node_count = node_count )
    if ( boundary_margin < 0.0 ):
      raise InfeasibleSpec( "boundary margin must be nonnegative", margin = boundary_margin )
    self.which = which
    self.shape = shape
    self.node_count = int( node_count )
    self.boundary_margin = float( boundary_margin )
    self.discs = list( options.pop( 'discs', [] ) )
    self.inner_radius = float( options.pop( 'inner_radius', 0.0 ) )
    self.outer_radius = options.pop( 'outer_radius', None )
    self.points = options.pop( 'points', None )
    self.truncation_factor = options.pop( 'truncation_factor', None )
    self.boundary_fraction = options.pop( 'boundary_fraction', None )
    self.growth = options.pop( 'growth', None )
    self.counts = options.pop( 'counts', None )
    if ( options ):
      raise InfeasibleSpec( "unknown plate options: {}".format( ", ".join( sorted( options ) ) ) )

  # convenience constructors so callers don't have to remember the options

  @classmethod
  def disc_stack( cls, discs, node_count, boundary_margin = 0.0, counts = None ):
    if ( counts is not None ):
      counts = [ int( c ) for c in counts ]
      if ( len( counts ) != len( discs ) or min( counts ) < 1 ):
        raise InfeasibleSpec( "a disc stack needs one positive node count per disc", counts = counts )
      node_count = sum( counts )
    return cls( A1, CNPlateSpec.DISC_STACK, node_count, boundary_margin, discs = discs, counts = counts )

  # K_k = {x1 = 1/k, x2^2 + x3^2 <= k^2}, k = 1..levels.  With a
  # resolution every disc gets at least nodes_per_disc nodes and enough of
  # them to keep its spacing below resolution times its clearance.
  @classmethod
  def disc_series( cls, levels, nodes_per_disc, boundary_margin = 0.0, resolution = None ):
    discs = [ CNDisc( 1.0 / k, float( k ) ) for k in range( 1, levels + 1 ) ]
    if ( resolution is None ):
      return cls.disc_stack( discs, levels * nodes_per_disc, boundary_margin )
    if ( not resolution > 0.0 ):
      raise InfeasibleSpec( "the disc resolution must be positive", resolution = resolution )
    counts = [ max( nodes_per_disc, int( math.ceil( math.pi * ( d.radius / ( resolution * d.offset ) ) ** 2 ) ) )
      for d in discs ]
    return cls.disc_stack( discs, sum( counts ), boundary_margin, counts )

  @classmethod
  def ball_interior( cls, node_count, boundary_margin = 0.0 ):
    return cls( A1, CNPlateSpec.BALL_INTERIOR, node_count, boundary_margin )

  @classmethod
  def annulus( cls, inner_radius, outer_radius, node_count ):
    return cls( A2, CNPlateSpec.ANNULUS, node_count,
      inner_radius = inner_radius, outer_radius = outer_radius )

  @classmethod
  def complement_shell( cls, node_count, truncation_factor = None, outer_radius = None,
                        boundary_fraction = None, growth = None ):
    return cls( A2, CNPlateSpec.COMPLEMENT_SHELL, node_count,
      truncation_factor = truncation_factor, outer_radius = outer_radius,
      boundary_fraction = boundary_fraction, growth = growth )

  @classmethod
  def custom( cls, which, points, boundary_margin = 0.0 ):
    points = np.atleast_2d( np.asarray( points, dtype = float ) )
    return cls( which, CNPlateSpec.CUSTOM, len( points ), boundary_margin, points = points )


# ----------------------------------------------------
# A discretized plate (or a union of plates).  'part' labels the
# disc a node came from in a disc stack (-1 elsewhere), so experiments can
# pick out K_1, ..., K_j.

class CNPointCloud:

  def __init__( self, points, cell_radius, plate_tag, seed = 0, cell_measure = None,
                part = None, truncated = False, truncation_radius = None ):
    self.points = np.atleast_2d( np.asarray( points, dtype = float ) )
    self.cell_radius = np.asarray( cell_radius, dtype = float )
    self.plate_tag = np.asarray( plate_tag, dtype = int )
    size = len( self.points )
    if ( self.cell_radius.shape != ( size, ) or self.plate_tag.shape != ( size, ) ):
      raise DimensionMismatch( "cloud arrays disagree on the node count", nodes = size )
    if ( size and not np.all( self.cell_radius > 0.0 ) ):
      raise InfeasibleSpec( "cell radii must be positive" )
    self.cell_measure = None if cell_measure is None else np.asarray( cell_measure, dtype = float )
    self.part = np.full( size, -1, dtype = int ) if part is None else np.asarray( part, dtype = int )
    self.seed = seed
    self.truncated = truncated
    self.truncation_radius = truncation_radius

  def __len__( self ):
    return len( self.points )

  def __repr__( self ):
    return "CNPointCloud({} nodes: {} A1, {} A2)".format( len( self ), len( self.a1 ), len( self.a2 ) )

  @property
  def dimension( self ):
    return self.points.shape[1]

  @property
  def a1( self ):
    return np.flatnonzero( self.plate_tag == A1 )

  @property
  def a2( self ):
    return np.flatnonzero( self.plate_tag == A2 )

  def part_indices( self, part ):
    return np.flatnonzero( self.part == part )

  def plate_measure( self, which ):
    if ( self.cell_measure is None ):
      return None
    return float( self.cell_measure[self.plate_tag == which].sum() )

  # twice the largest distance from the centroid: an upper bound for the
  # diameter that is cheap for thousands of nodes
  def extent( self, indices = None ):
    points = self.points if indices is None else self.points[indices]
    if ( len( points ) < 2 ):
      return 0.0
    centroid = points.mean( axis = 0 )
    return 2.0 * float( np.max( np.linalg.norm( points - centroid, axis = 1 ) ) )

  # sha256 over the node data, for manifests and determinism checks
  def fingerprint( self ):
    digest = hashlib.sha256()
    for array in ( self.points, self.cell_radius, self.plate_tag ):
      digest.update( np.ascontiguousarray( array ).tobytes() )
    return digest.hexdigest()

  # the cloud with one extra node appended (used for temporary nodes such
  # as the pole of a Dirac measure)
  def with_node( self, point, cell_radius, tag ):
    return CNPointCloud(
      np.vstack( ( self.points, np.asarray( point, dtype = float )[None, :] ) ),
      np.append( self.cell_radius, cell_radius ),
      np.append( self.plate_tag, tag ),
      seed = self.seed,
      cell_measure = None if self.cell_measure is None else np.append( self.cell_measure, 0.0 ),
      part = np.append( self.part, -1 ),
      truncated = self.truncated,
      truncation_radius = self.truncation_radius )

  @classmethod
  def union( cls, *clouds ):
    clouds = [ c for c in clouds if c is not None ]
    dims = set( c.dimension for c in clouds )
    if ( len( dims ) != 1 ):
      raise DimensionMismatch( "clouds live in different dimensions", dimensions = sorted( dims ) )
    measures = None
    if ( all( c.cell_measure is not None for c in clouds ) ):
      measures = np.concatenate( [ c.cell_measure for c in clouds ] )
    truncated = [ c for c in clouds if c.truncated ]
    return cls(
      np.vstack( [ c.points for c in clouds ] ),
      np.concatenate( [ c.cell_radius for c in clouds ] ),
      np.concatenate( [ c.plate_tag for c in clouds ] ),
      seed = clouds[0].seed,
      cell_measure = measures,
      part = np.concatenate( [ c.part for c in clouds ] ),
      truncated = bool( truncated ),
      truncation_radius = truncated[0].truncation_radius if truncated else None )


# half the nearest-neighbour distance inside one plate
def nearest_neighbour_radii( points, measures = None ):
  if ( len( points ) == 1 ):
    if ( measures is not None and measures[0] > 0.0 ):
      return np.array( [ max( math.sqrt( measures[0] / math.pi ), MIN_CELL_RADIUS ) ] )
    return np.ones( 1 )
  distances, _ = cKDTree( points ).query( points, k = 2 )
  if ( np.any( distances[:, 1] == 0.0 ) ):
    raise InfeasibleSpec( "plate has coincident nodes" )
  return np.maximum( 0.5 * distances[:, 1], MIN_CELL_RADIUS )


# ----------------------------------------------------
# the samplers for each plate shape; each returns (points, measures, parts)

def embed_planar( planar, dimension, offset, lateral ):
  points = np.zeros( ( len( planar ), dimension ) )
  points[:, 0] = offset
  points[:, 1:] = lateral
  points[:, 1:1 + planar.shape[1]] += planar
  return points

def sample_disc( disc, count, dimension, rng ):
  planar, measures = CNRadialGrading( 2, 0.0, disc.radius, count ).sample( rng )
  return embed_planar( planar, dimension, disc.offset, disc.lateral_center( dimension ) ), measures

def sample_disc_stack( domain, spec, rng ):
  if ( not spec.discs ):
    raise InfeasibleSpec( "a disc stack needs at least one disc" )
  kept = []
  for k, disc in enumerate( spec.discs ):
    clearance = disc.clearance( domain )
    if ( clearance <= 0.0 ):
      raise InfeasibleSpec( "disc {} is not inside D".format( k ), disc = repr( disc ) )
    if ( clearance < spec.boundary_margin ):
      logger.info( "disc %d dropped: clearance %.3g below margin %.3g", k, clearance, spec.boundary_margin )
      continue
    kept.append( k )
  if ( not kept ):
    raise InfeasibleSpec( "the boundary margin excludes the whole plate", margin = spec.boundary_margin )
  if ( spec.node_count < len( kept ) ):
    raise InfeasibleSpec( "fewer nodes than discs", nodes = spec.node_count, discs = len( kept ) )

  if ( spec.counts is not None ):
    counts = [ spec.counts[k] for k in kept ]
  else:
    counts = [ spec.node_count // len( kept ) ] * len( kept )
    for j in range( spec.node_count % len( kept ) ):
      counts[j] += 1
  points, measures, parts = [], [], []
  for k, count in zip( kept, counts ):
    p, m = sample_disc( spec.discs[k], count, domain.dimension, rng )
    points.append( p )
    measures.append( m )
    parts.append( np.full( count, k ) )
  return np.vstack( points ), np.concatenate( measures ), np.concatenate( parts )

def sample_ball_interior( domain, spec, rng ):
  if ( not domain.is_ball() ):
    raise InfeasibleSpec( "ball-interior plates need a ball domain" )
  usable = domain.radius - spec.boundary_margin
  if ( usable <= 0.0 ):
    raise InfeasibleSpec( "the boundary margin excludes the whole plate", margin = spec.boundary_margin )
  points, measures = CNRadialGrading( domain.dimension, 0.0, usable, spec.node_count ).sample( rng )
  return points + domain.center, measures, None

def sample_annulus( domain, spec, rng ):
  if ( not domain.is_halfspace() ):
    raise InfeasibleSpec( "annulus plates lie on the boundary plane of the half-space" )
  outer = spec.outer_radius
  if ( outer is None or outer <= spec.inner_radius or spec.inner_radius < 0.0 ):
    raise InfeasibleSpec( "annulus needs 0 <= inner < outer", inner = spec.inner_radius, outer = outer )
  n = domain.dimension
  planar, measures = CNRadialGrading( n - 1, spec.inner_radius, outer, spec.node_count ).sample( rng )
  return embed_planar( planar, n, 0.0, np.zeros( n - 1 ) ), measures, None

# The truncated complement: part of the nodes on the boundary of D, the
# rest in the volume of the complement out to the truncation radius.  The
# spacing is constant over the footprint of A1 (the part of the boundary
# within reach of A1) and grows by 'growth' per unit distance past it.
def sample_complement_shell( domain, spec, rng, reference = None ):
  n = domain.dimension
  factor = cnconf.setting( 'TRUNCATION_FACTOR', spec.truncation_factor )
  fraction = cnconf.setting( 'BOUNDARY_FRACTION', spec.boundary_fraction )
  growth = cnconf.setting( 'SPACING_GROWTH', spec.growth )
  if ( not 0.0 < fraction <= 1.0 ):
    raise InfeasibleSpec( "boundary fraction must lie in (0, 1]", fraction = fraction )

  outer = spec.outer_radius
  if ( outer is None ):
    if ( reference is None or len( reference ) == 0 ):
      raise InfeasibleSpec( "the A2 shell needs an outer radius or an A1 cloud to size it" )
    diameter = reference.extent()
    if ( diameter == 0.0 ):
      diameter = 2.0 * float( np.max( reference.cell_radius ) )
    outer = factor * diameter
    if ( domain.is_ball() ):
      outer = max( outer, 2.0 * domain.radius )
  if ( domain.is_ball() and outer <= domain.radius ):
    raise InfeasibleSpec( "the A2 shell must reach beyond the ball", outer_radius = outer )

  on_boundary = max( 1, int( round( fraction * spec.node_count ) ) )
  in_volume = spec.node_count - on_boundary
  volume, volume_measures = np.zeros( ( 0, n ) ), np.zeros( 0 )

  if ( domain.is_halfspace() ):
    centre = np.zeros( n )
    footprint = 0.0
    if ( reference is not None and len( reference ) ):
      centre[1:] = reference.points[:, 1:].mean( axis = 0 )
      lateral = np.linalg.norm( reference.points[:, 1:] - centre[1:], axis = 1 )
      footprint = float( np.max( lateral ) + np.max( domain.distance_to_boundary( reference.points ) ) )
    plane = CNRadialGrading( n - 1, 0.0, outer, on_boundary, flat = footprint, growth = growth )
    planar, boundary_measures = plane.sample( rng )
    boundary = embed_planar( planar, n, 0.0, centre[1:] )
    if ( in_volume ):
      solid, volume_measures = CNRadialGrading( n, 0.0, outer, in_volume, flat = footprint, growth = growth,
        half = True ).sample( rng )
      volume = solid + centre
    logger.debug( "boundary plane: %s", plane )
  else:
    boundary = domain.center + domain.radius * sphere_directions( on_boundary, n, rng )
    boundary_measures = np.full( on_boundary, sphere_area( n, domain.radius ) / on_boundary )
    if ( in_volume ):
      solid, volume_measures = CNRadialGrading( n, domain.radius, outer, in_volume, flat = 0.0,
        growth = growth ).sample( rng )
      volume = solid + domain.center

  logger.info( "A2 truncated to radius %.4g around %s (%d boundary + %d volume nodes, spacing growth %g); "
    "mass lost past the truncation is not modelled", outer,
    "the projection of A1" if domain.is_halfspace() else "the ball centre", on_boundary, in_volume, growth )
  points = np.vstack( ( boundary, volume ) )
  return points, np.concatenate( ( boundary_measures, volume_measures ) ), None, outer

def sample_custom( domain, spec, rng ):
  points = domain.check_points( spec.points )
  return points, None, None


# ----------------------------------------------------
# build the point cloud for one plate

def discretize( domain, spec, seed = 0, reference = None ):
  rng = np.random.default_rng( [ int( seed ), spec.which ] )
  truncation_radius = None
  if ( spec.shape == CNPlateSpec.DISC_STACK ):
    points, measures, parts = sample_disc_stack( domain, spec, rng )
  elif ( spec.shape == CNPlateSpec.BALL_INTERIOR ):
    points, measures, parts = sample_ball_interior( domain, spec, rng )
  elif ( spec.shape == CNPlateSpec.ANNULUS ):
    points, measures, parts = sample_annulus( domain, spec, rng )
  elif ( spec.shape == CNPlateSpec.COMPLEMENT_SHELL ):
    points, measures, parts, truncation_radius = sample_complement_shell( domain, spec, rng, reference )
  else:
    points, measures, parts = sample_custom( domain, spec, rng )

  if ( spec.which == A1 ):
    inside = domain.contains( points )
    if ( spec.boundary_margin > 0.0 ):
      inside &= domain.distance_to_boundary( points ) >= spec.boundary_margin
    if ( not np.all( inside ) ):
      bad = int( np.flatnonzero( ~inside )[0] )
      raise InfeasibleSpec( "A1 node outside D or inside the boundary margin", node = bad )
  else:
    outside = domain.in_complement( points )
    if ( not np.all( outside ) ):
      raise InfeasibleSpec( "A2 node inside D", node = int( np.flatnonzero( ~outside )[0] ) )

  radii = nearest_neighbour_radii( points, measures )
  if ( measures is None ):
    measures = math.pi * radii ** 2
  return CNPointCloud( points, radii, np.full( len( points ), spec.which ), seed = seed,
    cell_measure = measures, part = parts,
    truncated = truncation_radius is not None, truncation_radius = truncation_radius )

# both plates in one cloud, A1 nodes first
def discretize_condenser( domain, a1_spec, a2_spec = None, seed = 0 ):
  a1 = discretize( domain, a1_spec, seed )
  if ( a2_spec is None ):
    return a1
  a2 = discretize( domain, a2_spec, seed, reference = a1 )
  return CNPointCloud.union( a1, a2 )


# ----------------------------------------------------
# Inversion in the sphere S(centre, radius), applied to a discrete
# measure.  Weights pick up (R/|x-c|)^(n-alpha) and cell radii
# R^2/|x-c|^2, which leaves the discrete alpha-Riesz energy unchanged.

def kelvin_transform( cloud, weights, centre, radius, alpha ):
  centre = np.asarray( centre, dtype = float )
  offsets = cloud.points - centre
  distances = np.linalg.norm( offsets, axis = 1 )
  if ( np.any( distances == 0.0 ) ):
    raise InfeasibleSpec( "a node sits on the inversion centre" )
  scale = radius ** 2 / distances ** 2
  points = centre + offsets * scale[:, None]
  n = cloud.dimension
  new_weights = np.asarray( weights, dtype = float ) * ( radius / distances ) ** ( n - alpha )
  image = CNPointCloud( points, cloud.cell_radius * scale, cloud.plate_tag, seed = cloud.seed,
    part = cloud.part )
  return image, new_weights


# ----------------------------------------------------

class CNGeometryTest( TestCase ):

  def setUp( self ):
    self.unit_ball = CNDomain.ball( [ 0.0, 0.0, 0.0 ], 1.0, alpha = 1.5 )
    self.halfspace = CNDomain.halfspace( 3, 2.0 )

  def test_ball_interior_membership( self ):
    cloud = discretize( self.unit_ball, CNPlateSpec.ball_interior( 100, 0.1 ), seed = 3 )
    self.assertEqual( len( cloud ), 100 )
    self.assertTrue( np.all( np.linalg.norm( cloud.points, axis = 1 ) <= 0.9 + 1e-12 ) )
    self.assertTrue( np.all( cloud.cell_radius > 0.0 ) )

  def test_first_disc_of_series( self ):
    cloud = discretize( self.halfspace, CNPlateSpec.disc_series( 1, 50 ) )
    self.assertTrue( np.all( cloud.points[:, 0] == 1.0 ) )
    self.assertTrue( np.all( cloud.points[:, 1] ** 2 + cloud.points[:, 2] ** 2 <= 1.0 ) )

  def test_disc_series_parts( self ):
    cloud = discretize( self.halfspace, CNPlateSpec.disc_series( 3, 40 ) )
    self.assertEqual( len( cloud.part_indices( 2 ) ), 40 )
    self.assertTrue( np.allclose( cloud.points[cloud.part_indices( 2 ), 0], 1.0 / 3.0 ) )

  def test_determinism( self ):
    spec = CNPlateSpec.ball_interior( 80 )
    first = discretize( self.unit_ball, spec, seed = 11 )
    second = discretize( self.unit_ball, spec, seed = 11 )
    other = discretize( self.unit_ball, spec, seed = 12 )
    self.assertTrue( np.array_equal( first.points, second.points ) )
    self.assertTrue( np.array_equal( first.cell_radius, second.cell_radius ) )
    self.assertEqual( first.fingerprint(), second.fingerprint() )
    self.assertNotEqual( first.fingerprint(), other.fingerprint() )

  def test_reflection( self ):
    self.assertTrue( np.array_equal( reflect_across_boundary( self.halfspace, [ 1.0, 0.0, 0.0 ] ),
      [ -1.0, 0.0, 0.0 ] ) )
    self.assertTrue( np.array_equal( reflect_across_boundary( self.halfspace, [ 0.0, 5.0, 2.0 ] ),
      [ 0.0, 5.0, 2.0 ] ) )
    points = np.random.default_rng( 0 ).normal( size = ( 20, 3 ) )
    twice = reflect_across_boundary( self.halfspace, reflect_across_boundary( self.halfspace, points ) )
    self.assertTrue( np.array_equal( twice, points ) )
    with self.assertRaises( UnsupportedDomain ):
      reflect_across_boundary( self.unit_ball, [ 0.5, 0.0, 0.0 ] )

  def test_cells_tile_the_plate( self ):
    disc = discretize( self.halfspace, CNPlateSpec.disc_stack( [ CNDisc( 0.5, 2.0 ) ], 300 ) )
    self.assertAlmostEqual( disc.plate_measure( A1 ) / ( math.pi * 4.0 ), 1.0, delta = 0.05 )
    ball = discretize( self.unit_ball, CNPlateSpec.ball_interior( 400, 0.2 ) )
    self.assertAlmostEqual( ball.plate_measure( A1 ) / ball_volume( 3, 0.8 ), 1.0, delta = 0.05 )

  def test_complement_shell( self ):
    a1 = CNPlateSpec.disc_stack( [ CNDisc( 0.5, 1.0 ) ], 60 )
    a2 = CNPlateSpec.complement_shell( 300, outer_radius = 4.0 )
    cloud = discretize_condenser( self.halfspace, a1, a2, seed = 5 )
    self.assertEqual( len( cloud.a1 ), 60 )
    self.assertEqual( len( cloud.a2 ), 300 )
    self.assertTrue( np.all( self.halfspace.contains( cloud.points[cloud.a1] ) ) )
    self.assertTrue( np.all( self.halfspace.in_complement( cloud.points[cloud.a2] ) ) )
    self.assertFalse( np.any( self.halfspace.contains( cloud.points[cloud.a2] ) ) )
    self.assertTrue( cloud.truncated )
    expected = math.pi * 16.0 + 0.5 * ball_volume( 3, 4.0 )
    self.assertAlmostEqual( cloud.plate_measure( A2 ) / expected, 1.0, places = 9 )

  def test_ball_complement_shell( self ):
    a1 = CNPlateSpec.ball_interior( 50 )
    a2 = CNPlateSpec.complement_shell( 200, truncation_factor = 3.0 )
    cloud = discretize_condenser( self.unit_ball, a1, a2 )
    norms = np.linalg.norm( cloud.points[cloud.a2], axis = 1 )
    self.assertTrue( np.all( norms >= 1.0 - 1e-12 ) )
    self.assertGreater( cloud.truncation_radius, 1.0 )

  def test_cell_radius_is_half_nearest_distance( self ):
    spec = CNPlateSpec.custom( A1, [ [ 1.0, 0.0, 0.0 ], [ 3.0, 0.0, 0.0 ], [ 7.0, 0.0, 0.0 ] ] )
    cloud = discretize( self.halfspace, spec )
    self.assertTrue( np.allclose( cloud.cell_radius, [ 1.0, 1.0, 2.0 ] ) )

  def test_margin_excludes_plate( self ):
    spec = CNPlateSpec.disc_stack( [ CNDisc( 0.1, 1.0 ) ], 20, boundary_margin = 0.5 )
    with self.assertRaises( InfeasibleSpec ):
      discretize( self.halfspace, spec )
    with self.assertRaises( InfeasibleSpec ):
      discretize( self.unit_ball, CNPlateSpec.ball_interior( 20, 1.0 ) )

  def test_margin_drops_close_discs( self ):
    discs = [ CNDisc( 0.1, 1.0 ), CNDisc( 1.0, 1.0 ) ]
    cloud = discretize( self.halfspace, CNPlateSpec.disc_stack( discs, 30, boundary_margin = 0.5 ) )
    self.assertEqual( len( cloud ), 30 )
    self.assertTrue( np.all( cloud.part == 1 ) )

  def test_spec_domain_mismatch( self ):
    with self.assertRaises( InfeasibleSpec ):
      discretize( self.halfspace, CNPlateSpec.ball_interior( 10 ) )
    with self.assertRaises( InfeasibleSpec ):
      discretize( self.halfspace, CNPlateSpec.custom( A1, [ [ -1.0, 0.0, 0.0 ] ] ) )

  def test_dimension_mismatch( self ):
    with self.assertRaises( DimensionMismatch ):
      CNDomain.halfspace( 2 )
    with self.assertRaises( DimensionMismatch ):
      discretize( self.halfspace, CNPlateSpec.custom( A1, [ [ 1.0, 0.0 ] ] ) )

  def test_kelvin_maps_halfspace_into_ball( self ):
    spec = CNPlateSpec.disc_stack( [ CNDisc( 0.3, 0.5, [ 1.0, 0.0 ] ) ], 40 )
    cloud = discretize( self.halfspace, spec )
    image, weights = kelvin_transform( cloud, np.ones( 40 ) / 40, [ -2.0, 0.0, 0.0 ], 2.0, 2.0 )
    ball = CNDomain.ball( [ -1.0, 0.0, 0.0 ], 1.0 )
    self.assertTrue( np.all( ball.contains( image.points ) ) )
    self.assertTrue( np.all( weights > 0.0 ) )

  def test_radial_grading_tiles_the_shell( self ):
    rng = np.random.default_rng( 3 )
    shell = CNRadialGrading( 3, 1.0, 10.0, 500, flat = 1.0, growth = 0.5 )
    points, measures = shell.sample( rng )
    norms = np.linalg.norm( points, axis = 1 )
    self.assertEqual( len( points ), 500 )
    self.assertTrue( np.all( ( norms > 1.0 ) & ( norms < 10.0 ) ) )
    self.assertAlmostEqual( measures.sum() / ( 4.0 * math.pi / 3.0 * 999.0 ), 1.0, places = 9 )
    plane = CNRadialGrading( 2, 0.0, 50.0, 200, flat = 2.0, growth = 0.5 )
    points, measures = plane.sample( rng )
    self.assertEqual( len( points ), 200 )
    self.assertAlmostEqual( measures.sum() / ( math.pi * 2500.0 ), 1.0, places = 9 )
    # the spacing grows past the flat part
    self.assertLess( plane.radius_at( 0.5 ), 25.0 )

  def test_half_grading_stays_below_the_plane( self ):
    points, measures = CNRadialGrading( 3, 0.0, 5.0, 300, flat = 2.0, growth = 0.5, half = True ).sample(
      np.random.default_rng( 4 ) )
    self.assertEqual( len( points ), 300 )
    self.assertTrue( np.all( points[:, 0] < 0.0 ) )
    self.assertAlmostEqual( measures.sum() / ( 0.5 * ball_volume( 3, 5.0 ) ), 1.0, places = 9 )

  def test_shell_count_matches_spacing( self ):
    count = shell_count( 2, 0.0, 100.0, 0.3, flat = 3.0, growth = 0.5 )
    grading = CNRadialGrading( 2, 0.0, 100.0, count, flat = 3.0, growth = 0.5 )
    self.assertLessEqual( grading.spacing, 0.3 )
    self.assertAlmostEqual( grading.spacing, 0.3, delta = 0.01 )
    self.assertEqual( shell_count( 2, 0.0, 10.0, 0.5 ), int( math.ceil( math.pi * 100.0 / 0.25 ) ) )
    with self.assertRaises( InfeasibleSpec ):
      CNRadialGrading( 3, 0.0, 1.0, 10, growth = -1.0 )
    self.assertEqual( apportion( 10, [ 1.0, 1.0, 1.0 ] ).sum(), 10 )

  def test_disc_series_resolution( self ):
    spec = CNPlateSpec.disc_series( 3, 12, resolution = 2.0 )
    self.assertEqual( spec.counts, [ 12, 13, 64 ] )
    cloud = discretize( self.halfspace, spec )
    self.assertEqual( len( cloud ), 89 )
    self.assertEqual( len( cloud.part_indices( 2 ) ), 64 )
