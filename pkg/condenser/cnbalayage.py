# Balayage onto A2 as the orthogonal projection, in the Riesz energy norm,
# of a measure onto the cone of nonnegative measures carried by A2 nodes:
#
#   mu' = argmin { || mu - theta ||^2 : theta >= 0 on A2 }
#       = argmin { theta^T K22 theta - 2 theta^T (K mu)_A2 }
#
# When K22^-1 (K mu)_A2 is already nonnegative it is the answer; otherwise
# the nonnegativity QP is solved starting from its clipped value.  Also
# here: Dirac balayage (the oracle behind the numeric Green kernel),
# equilibrium measures and capacities, the Green energy identity, and the
# Green matrix for alpha < 2 assembled from balayages.

import logging

import numpy as np

from numpy.linalg import LinAlgError
from scipy.linalg import cho_factor, cho_solve

from django.test import TestCase

from condenser import cnconf
from condenser.cnerrors import CloudMismatch, NotPositiveDefinite, OutsideDomain, UnsupportedDomain
from condenser.cngeometry import CNDomain, CNPlateSpec, discretize_condenser
from condenser.cnkernel import CNKernelKind, CNKernelMatrix, assemble, riesz_values, symmetrize
from condenser.cnmeasure import CNMeasure, energy, potential
from condenser.cnqp import CNQuadraticProgram

logger = logging.getLogger( __name__ )

# relative size of a negative entry we still treat as rounding
NEGATIVE_ROUNDING = 1e-12


# ----------------------------------------------------
# Sweeps measures onto the A2 nodes of a Riesz matrix.  The Cholesky
# factor of the A2 block is shared by every sweep.  Calling the operator
# with a point y of D returns the balayage of the unit mass at y, which is
# the oracle green_kernel_numeric expects.

class CNBalayageOperator:

  def __init__( self, riesz, tolerance = None ):
    if ( not riesz.kind.is_riesz() ):
      raise CloudMismatch( "balayage is taken in the Riesz energy norm" )
    if ( riesz.cloud is None ):
      raise CloudMismatch( "balayage needs the kernel's point cloud" )
    self.riesz = riesz
    self.cloud = riesz.cloud
    self.a2 = self.cloud.a2
    if ( len( self.a2 ) == 0 ):
      raise UnsupportedDomain( "the cloud has no A2 nodes to sweep onto" )
    self.a2_positions = riesz.positions( self.a2 )
    self.tolerance = tolerance
    self._factor = None
    self.fallbacks = 0

  def block( self ):
    return self.riesz.values[np.ix_( self.a2_positions, self.a2_positions )]

  def factor( self ):
    if ( self._factor is None ):
      try:
        self._factor = cho_factor( self.block() )
      except LinAlgError:
        raise NotPositiveDefinite( "the A2 block of the Riesz matrix is not positive definite",
          nodes = len( self.a2 ) )
    return self._factor

  # theta >= 0 on A2 minimizing theta^T K22 theta - 2 theta^T target
  def sweep_potential( self, target, tolerance = None ):
    theta = cho_solve( self.factor(), target )
    largest = float( np.max( np.abs( theta ) ) ) if len( theta ) else 0.0
    if ( np.min( theta ) >= -NEGATIVE_ROUNDING * largest ):
      return np.maximum( theta, 0.0 ), True
    self.fallbacks += 1
    qp = CNQuadraticProgram( self.block(), -target, label = 'balayage' )
    result = qp.solve( np.maximum( theta, 0.0 ), tolerance = self.tolerance if tolerance is None else tolerance )
    return result.x, False

  def measure( self, theta, exact, label ):
    weights = np.zeros( len( self.cloud ) )
    weights[self.a2] = theta
    swept = CNMeasure( self.cloud, weights, label )
    swept.meta['exact_projection'] = exact
    return swept

  def sweep( self, mu, tolerance = None ):
    target = potential( mu, self.riesz, self.a2 )
    theta, exact = self.sweep_potential( target, tolerance )
    return self.measure( theta, exact, mu.label + "'" if mu.label else 'swept' )

  # point sources off the cloud with the given weights
  def sweep_sources( self, points, weights ):
    target = riesz_values( self.cloud.points[self.a2], np.atleast_2d( points ),
      self.riesz.kind.alpha, self.riesz.kind.dimension ) @ np.asarray( weights, dtype = float )
    theta, exact = self.sweep_potential( target )
    return self.measure( theta, exact, 'swept sources' )

  def __call__( self, y ):
    return self.sweep_sources( np.atleast_2d( y ), [ 1.0 ] )


# one operator per Riesz matrix
def operator_for( riesz, tolerance = None ):
  operator = getattr( riesz, 'sweeper', None )
  if ( operator is None ):
    operator = CNBalayageOperator( riesz, tolerance )
    riesz.sweeper = operator
  return operator

def balayage( mu, riesz, tolerance = None ):
  return operator_for( riesz ).sweep( mu, tolerance )

def dirac_balayage( y, cloud, riesz, domain = None ):
  y = np.asarray( y, dtype = float )
  if ( riesz.cloud is not None and riesz.cloud is not cloud and len( riesz.cloud ) != len( cloud ) ):
    raise CloudMismatch( "Dirac balayage cloud differs from the kernel's" )
  if ( domain is not None and not domain.contains( y[None, :] )[0] ):
    raise OutsideDomain( "the pole of a Dirac balayage must lie in D", point = y.tolist() )
  return operator_for( riesz )( y )

# ||mu - mu'||^2, the Green energy of mu
def green_energy_via_identity( mu, riesz, swept = None ):
  swept = balayage( mu, riesz ) if swept is None else swept
  return energy_identity_report( mu, riesz, swept )['difference_form']

# both ways of writing the Green energy: ||mu - mu'||^2 and ||mu||^2 - ||mu'||^2
def energy_identity_report( mu, riesz, swept = None ):
  swept = balayage( mu, riesz ) if swept is None else swept
  difference = ( mu.weights - swept.weights )[riesz.indices]
  difference_form = float( difference @ riesz.values @ difference )
  subtraction_form = energy( mu, mu, riesz ) - energy( swept, swept, riesz )
  scale = max( abs( difference_form ), abs( subtraction_form ), 1e-300 )
  return {
    'difference_form': difference_form,
    'subtraction_form': subtraction_form,
    'relative_gap': abs( difference_form - subtraction_form ) / scale,
    'swept_mass': swept.mass(),
    'mass': mu.mass(),
    'exact_projection': swept.meta.get( 'exact_projection', False ),
  }


# ----------------------------------------------------
# The minimizer of the energy over probability measures on 'nodes', and
# the capacity 1 / E.  When K^-1 1 is nonnegative it is the answer up to
# normalization.

def equilibrium_measure( nodes, K, cloud = None, tolerance = None ):
  nodes = np.asarray( nodes, dtype = int )
  cloud = K.cloud if cloud is None else cloud
  if ( len( nodes ) == 0 ):
    raise CloudMismatch( "the equilibrium measure of an empty node set is undefined" )
  block = K.block( nodes, nodes )
  try:
    v = cho_solve( cho_factor( block ), np.ones( len( nodes ) ) )
  except LinAlgError:
    raise NotPositiveDefinite( "kernel block is not positive definite", nodes = len( nodes ) )
  total = float( v.sum() )
  exact = total > 0.0 and np.min( v ) >= -NEGATIVE_ROUNDING * float( np.max( np.abs( v ) ) )
  if ( exact ):
    weights = np.maximum( v, 0.0 ) / float( np.maximum( v, 0.0 ).sum() )
  else:
    qp = CNQuadraticProgram( block, np.zeros( len( nodes ) ), groups = [ np.arange( len( nodes ) ) ],
      targets = [ 1.0 ], label = 'equilibrium' )
    start = np.maximum( v, 0.0 )
    start = start / start.sum() if start.sum() > 0.0 else None
    weights = qp.solve( start, tolerance = tolerance ).x
  measure = CNMeasure.on_nodes( cloud, nodes, weights, 'equilibrium' )
  measure.meta['exact_projection'] = bool( exact )
  capacity = 1.0 / float( weights @ block @ weights )
  return measure, capacity


# ----------------------------------------------------
# Green matrix over A1 for kernels without a closed form:
#
#   g(x, y) = kappa(x, y) - U^{eps_y'}(x)
#
# column by column, with eps_y' from one shared factorization of K22.
# The diagonal inherits the Riesz self term.

def assemble_green_by_balayage( kind, cloud, beta = None, threads = None, tolerance = None, riesz = None ):
  if ( len( cloud.a2 ) == 0 ):
    raise UnsupportedDomain( "the Green kernel for alpha < 2 is swept onto A2; the cloud has none" )
  if ( len( cloud.a1 ) == 0 ):
    raise CloudMismatch( "the Green kernel lives on A1 nodes and the cloud has none" )
  beta = cnconf.setting( 'BETA', beta )
  if ( riesz is None or riesz.cloud is not cloud or riesz.kind.alpha != kind.alpha
       or riesz.diagonal_rule.get( 'beta' ) != beta ):
    riesz = assemble( kind.matching_riesz(), cloud, beta = beta, threads = threads )
  operator = operator_for( riesz, tolerance )
  a1 = cloud.a1
  a1_positions = riesz.positions( a1 )
  cross = riesz.values[np.ix_( operator.a2_positions, a1_positions )]
  swept = cho_solve( operator.factor(), cross )
  negative = np.flatnonzero( np.min( swept, axis = 0 ) < -NEGATIVE_ROUNDING * np.max( np.abs( swept ), axis = 0 ) )
  for column in negative:
    swept[:, column], _ = operator.sweep_potential( cross[:, column] )
  swept = np.maximum( swept, 0.0 )
  values = riesz.values[np.ix_( a1_positions, a1_positions )] - cross.T @ swept
  values = symmetrize( 0.5 * ( values + values.T ) )
  logger.info( "%s assembled from balayage onto %d A2 nodes (%d columns needed the QP)",
    kind, len( cloud.a2 ), len( negative ) )
  green = CNKernelMatrix( values, kind, a1, cloud, {
    'rule': 'balayage', 'beta': beta, 'a2_nodes': int( len( cloud.a2 ) ), 'qp_columns': int( len( negative ) ) } )
  green.swept_columns = swept
  green.swept_by = riesz
  return green

# The balayage of a measure carried by A1.  When 'green' was built by
# balayage with this Riesz matrix the sweep is the same combination of its
# unit-mass sweeps, which keeps U^(mu - mu') and U_g^mu equal on A1.
def sweep_through_green( mu, riesz, green = None ):
  if ( green is None or green.swept_columns is None or green.swept_by is not riesz ):
    return balayage( mu, riesz )
  cloud = riesz.cloud
  weights = np.zeros( len( cloud ) )
  weights[cloud.a2] = green.swept_columns @ mu.weights[green.indices]
  swept = CNMeasure( cloud, weights, mu.label + "'" if mu.label else 'swept' )
  swept.meta['exact_projection'] = green.diagonal_rule.get( 'qp_columns' ) == 0
  return swept


# ----------------------------------------------------

class CNBalayageTest( TestCase ):

  def setUp( self ):
    self.halfspace = CNDomain.halfspace( 3, 2.0 )
    self.cloud = discretize_condenser( self.halfspace, CNPlateSpec.disc_series( 1, 60 ),
      CNPlateSpec.complement_shell( 1200 ), seed = 1 )
    self.riesz = assemble( CNKernelKind.riesz( 2.0, 3 ), self.cloud )
    self.uniform = CNMeasure.on_nodes( self.cloud, self.cloud.a1, 1.0 / len( self.cloud.a1 ) )

  def test_measure_on_a2_is_fixed( self ):
    rng = np.random.default_rng( 2 )
    nodes = rng.choice( self.cloud.a2, 20, replace = False )
    mu = CNMeasure.on_nodes( self.cloud, nodes, rng.uniform( 0.1, 1.0, 20 ) )
    swept = balayage( mu, self.riesz )
    self.assertTrue( np.allclose( swept.weights, mu.weights, atol = 1e-9 ) )

  def test_idempotent( self ):
    swept = balayage( self.uniform, self.riesz )
    twice = balayage( swept, self.riesz )
    difference = ( twice.weights - swept.weights )
    self.assertLess( float( difference @ self.riesz.values @ difference ), 1e-6 )

  def test_energy_identity( self ):
    swept = balayage( self.uniform, self.riesz, tolerance = 1e-12 )
    report = energy_identity_report( self.uniform, self.riesz, swept )
    self.assertLess( report['relative_gap'], 1e-8 )
    self.assertGreater( report['difference_form'], 0.0 )
    self.assertLess( energy( swept, swept, self.riesz ), energy( self.uniform, self.uniform, self.riesz ) )
    zero = CNMeasure.zero( self.cloud )
    self.assertEqual( green_energy_via_identity( zero, self.riesz ), 0.0 )

  def test_projection_optimality( self ):
    swept = balayage( self.uniform, self.riesz, tolerance = 1e-12 )
    gradient = potential( swept, self.riesz, self.cloud.a2 ) - potential( self.uniform, self.riesz, self.cloud.a2 )
    scale = self.riesz.scale
    self.assertGreaterEqual( np.min( gradient ), -1e-9 * scale )
    support = swept.weights[self.cloud.a2] > 1e-9
    self.assertLess( np.max( np.abs( gradient[support] ) ), 1e-9 * scale )

  def test_linearity( self ):
    rng = np.random.default_rng( 4 )
    first = CNMeasure.on_nodes( self.cloud, self.cloud.a1, rng.uniform( 0.0, 1.0, len( self.cloud.a1 ) ) )
    second = self.uniform
    combined = CNMeasure( self.cloud, 2.0 * first.weights + 3.0 * second.weights )
    swept = balayage( combined, self.riesz, tolerance = 1e-12 ).weights
    parts = 2.0 * balayage( first, self.riesz ).weights + 3.0 * balayage( second, self.riesz ).weights
    difference = swept - parts
    self.assertLess( float( difference @ self.riesz.values @ difference ),
      1e-3 * energy( combined, combined, self.riesz ) )

  def test_matches_closed_form_green( self ):
    green = assemble( CNKernelKind.green( self.halfspace ), self.cloud )
    closed = energy( self.uniform, self.uniform, green )
    swept = green_energy_via_identity( self.uniform, self.riesz )
    self.assertAlmostEqual( swept / closed, 1.0, delta = 0.03 )
    numeric = assemble( CNKernelKind.green( self.halfspace ), self.cloud, method = 'balayage' )
    self.assertAlmostEqual( energy( self.uniform, self.uniform, numeric ) / closed, 1.0, delta = 0.03 )

  def test_dirac_balayage( self ):
    swept = dirac_balayage( [ 1.0, 0.0, 0.0 ], self.cloud, self.riesz, self.halfspace )
    self.assertTrue( swept.carried_by( self.cloud.a2 ) )
    self.assertAlmostEqual( swept.mass(), 1.0, delta = 0.01 )
    with self.assertRaises( OutsideDomain ):
      dirac_balayage( [ -1.0, 0.0, 0.0 ], self.cloud, self.riesz, self.halfspace )

  def test_green_kernel_numeric_matches_closed_form( self ):
    from condenser.cnkernel import green_kernel_halfspace, green_kernel_numeric
    operator = operator_for( self.riesz )
    rng = np.random.default_rng( 6 )
    for _ in range( 10 ):
      x, y = rng.uniform( [ 0.8, -0.5, -0.5 ], [ 1.2, 0.5, 0.5 ], size = ( 2, 3 ) )
      value = green_kernel_numeric( x, y, self.halfspace, 2.0, operator )
      self.assertAlmostEqual( value / green_kernel_halfspace( x, y ), 1.0, delta = 0.02 )

  # U^mu' = U^mu below the plane, near A1
  def test_swept_potential_on_interior_a2( self ):
    swept = balayage( self.uniform, self.riesz, tolerance = 1e-12 )
    a2 = self.cloud.a2
    points = self.cloud.points[a2]
    depth = -points[:, 0]
    near = ( depth > self.cloud.cell_radius[a2] ) & ( np.linalg.norm( points, axis = 1 ) < 3.0 )
    nodes = a2[near]
    self.assertGreater( len( nodes ), 0 )
    original = potential( self.uniform, self.riesz, nodes )
    self.assertLess( np.max( np.abs( potential( swept, self.riesz, nodes ) / original - 1.0 ) ), 0.02 )

  def test_ball_dirac_balayage( self ):
    from condenser.cnkernel import green_kernel_numeric
    ball = CNDomain.ball( [ 0.0, 0.0, 0.0 ], 1.0, 2.0 )
    cloud = discretize_condenser( ball, CNPlateSpec.ball_interior( 40, 0.3 ),
      CNPlateSpec.complement_shell( 600 ), seed = 2 )
    riesz = assemble( CNKernelKind.riesz( 2.0, 3 ), cloud )
    swept = dirac_balayage( [ 0.0, 0.0, 0.0 ], cloud, riesz, ball )
    self.assertAlmostEqual( swept.mass(), 1.0, delta = 0.02 )
    value = green_kernel_numeric( [ 0.5, 0.0, 0.0 ], [ 0.0, 0.0, 0.0 ], ball, 2.0, operator_for( riesz ) )
    self.assertAlmostEqual( value, 1.0, delta = 0.02 )

  def test_equilibrium_single_node( self ):
    node = self.cloud.a1[:1]
    measure, capacity = equilibrium_measure( node, self.riesz )
    self.assertEqual( measure.mass(), 1.0 )
    self.assertAlmostEqual( capacity, 1.0 / self.riesz.block( node, node )[0, 0] )

  def test_equilibrium_potential_is_flat( self ):
    measure, capacity = equilibrium_measure( self.cloud.a1, self.riesz )
    self.assertAlmostEqual( measure.mass(), 1.0, places = 12 )
    values = potential( measure, self.riesz, measure.support( 1e-6 / len( self.cloud.a1 ) ) )
    self.assertLess( np.max( np.abs( values * capacity - 1.0 ) ), 1e-4 )

  def test_capacity_scales_with_radius( self ):
    from condenser.cngeometry import CNDisc
    capacities = []
    for radius in ( 1.0, 2.0 ):
      spec = CNPlateSpec.disc_stack( [ CNDisc( 1.0, radius ) ], 150 )
      cloud = discretize_condenser( self.halfspace, spec, seed = 5 )
      riesz = assemble( CNKernelKind.riesz( 2.0, 3 ), cloud )
      capacities.append( equilibrium_measure( cloud.a1, riesz )[1] )
    self.assertAlmostEqual( capacities[1] / capacities[0], 2.0, places = 8 )

  def test_case_two_field_vanishes_on_a2( self ):
    from condenser.cnmeasure import CNExternalField, weighted_energy
    zeta = CNMeasure.point_mass( self.cloud, self.cloud.a1[0], 0.5 )
    field = CNExternalField.case_two_on_cloud( zeta, self.riesz )
    scale = self.riesz.scale * 1e-7
    self.assertLessEqual( np.max( field.values[self.cloud.a2] ), scale )
    support = field.swept.weights[self.cloud.a2] > 1e-6
    self.assertLess( np.max( np.abs( field.values[self.cloud.a2][support] ) ), scale )
    mu = self.uniform
    shifted = mu.weights + zeta.weights - field.swept.weights
    source = zeta.weights - field.swept.weights
    self.assertAlmostEqual( weighted_energy( mu, self.riesz, field ),
      float( shifted @ self.riesz.values @ shifted - source @ self.riesz.values @ source ), places = 8 )

  def test_needs_a2( self ):
    cloud = discretize_condenser( self.halfspace, CNPlateSpec.disc_series( 1, 10 ) )
    with self.assertRaises( UnsupportedDomain ):
      assemble_green_by_balayage( CNKernelKind.green( CNDomain.halfspace( 3, 1.5 ) ), cloud )
