# This file defines discrete measures on a point cloud (a weight per node),
# signed measures on a condenser (positive part on A1, negative part on
# A2), the constraint xi, the external field f, and the potentials and
# (weighted) energies computed from kernel matrices:
#
#   U^mu       = K mu
#   E(mu, nu)  = mu^T K nu
#   W^mu       = U^mu + f
#   G(mu)      = E(mu, mu) + 2 <f, mu+>     (the field only sees mu+)

import csv
import logging

import numpy as np

from django.test import TestCase

from condenser import cnconf
from condenser.cnerrors import CloudMismatch, Infeasible, InfeasibleSpec
from condenser.cngeometry import A1, A2, CNPointCloud

logger = logging.getLogger( __name__ )

DEGENERATE_MARGIN = 1e-10

# Case I asks for a lower semicontinuous field that may be +inf on a set
# of capacity zero; on a cloud we can only ask for finite values
CASE_I_RELAXATION = "case I: lower semicontinuity not checkable on nodes; f required finite at every node"
A1_CIRCLE_RELAXATION = "A1 restricted to nodes where f is finite is taken as all A1 nodes"


# ----------------------------------------------------
# A nonnegative weight per node of 'cloud'.

class CNMeasure:

  def __init__( self, cloud, weights, label = '' ):
    weights = np.asarray( weights, dtype = float )
    if ( weights.shape != ( len( cloud ), ) ):
      raise CloudMismatch( "one weight per cloud node expected", nodes = len( cloud ), weights = weights.size )
    if ( np.any( weights < 0.0 ) or not np.all( np.isfinite( weights ) ) ):
      raise InfeasibleSpec( "measure weights must be finite and nonnegative", label = label )
    self.cloud = cloud
    self.weights = weights
    self.label = label
    self.meta = {}

  @classmethod
  def zero( cls, cloud, label = '' ):
    return cls( cloud, np.zeros( len( cloud ) ), label )

  @classmethod
  def on_nodes( cls, cloud, nodes, values, label = '' ):
    weights = np.zeros( len( cloud ) )
    weights[np.asarray( nodes, dtype = int )] = values
    return cls( cloud, weights, label )

  @classmethod
  def point_mass( cls, cloud, node, mass = 1.0, label = '' ):
    return cls.on_nodes( cloud, [ node ], [ mass ], label )

  def __repr__( self ):
    return "CNMeasure({}mass={:.6g}, {} support nodes)".format(
      self.label + ", " if self.label else "", self.mass(), len( self.support() ) )

  def mass( self, nodes = None ):
    if ( nodes is None ):
      return float( self.weights.sum() )
    return float( self.weights[nodes].sum() )

  def support( self, cutoff = 0.0 ):
    return np.flatnonzero( self.weights > cutoff )

  def carried_by( self, nodes ):
    outside = np.ones( len( self.weights ), dtype = bool )
    outside[np.asarray( nodes, dtype = int )] = False
    return not np.any( self.weights[outside] > 0.0 )

  def restricted( self, nodes ):
    weights = np.zeros_like( self.weights )
    weights[nodes] = self.weights[nodes]
    return CNMeasure( self.cloud, weights, self.label )

  def scaled( self, factor, label = None ):
    return CNMeasure( self.cloud, factor * self.weights, self.label if label is None else label )

  def normalized( self ):
    return self.scaled( 1.0 / self.mass() )

  def plus_part( self ):
    return self

  def write_csv( self, path ):
    write_weights_csv( path, self.cloud, self.weights )


def write_weights_csv( path, cloud, weights ):
  with open( path, 'w', newline = '' ) as out:
    writer = csv.writer( out )
    writer.writerow( [ 'index' ] + [ 'x{}'.format( k + 1 ) for k in range( cloud.dimension ) ] + [ 'weight' ] )
    for i in np.flatnonzero( weights > 0.0 ):
      writer.writerow( [ int( i ) ] + [ repr( float( x ) ) for x in cloud.points[i] ] + [ repr( float( weights[i] ) ) ] )

def same_cloud( first, second ):
  if ( first is None or second is None or first is second ):
    return True
  return len( first ) == len( second ) and np.array_equal( first.points, second.points )


# ----------------------------------------------------
# mu = plus - minus with plus on A1 nodes and minus on A2 nodes

class CNSignedMeasure:

  def __init__( self, plus, minus ):
    if ( not same_cloud( plus.cloud, minus.cloud ) ):
      raise CloudMismatch( "positive and negative parts live on different clouds" )
    cloud = plus.cloud
    if ( not plus.carried_by( cloud.a1 ) ):
      raise CloudMismatch( "the positive part must be carried by A1" )
    if ( not minus.carried_by( cloud.a2 ) ):
      raise CloudMismatch( "the negative part must be carried by A2" )
    self.plus = plus
    self.minus = minus
    self.meta = {}

  @property
  def cloud( self ):
    return self.plus.cloud

  @property
  def weights( self ):
    return self.plus.weights - self.minus.weights

  def plus_part( self ):
    return self.plus

  def __repr__( self ):
    return "CNSignedMeasure(plus mass={:.6g}, minus mass={:.6g})".format( self.plus.mass(), self.minus.mass() )

  def write_csv( self, prefix ):
    self.plus.write_csv( prefix + '_plus.csv' )
    self.minus.write_csv( prefix + '_minus.csv' )


# ----------------------------------------------------
# the constraint xi, carried by A1, with xi(A1) > 1

class CNConstraint:

  def __init__( self, xi, riesz = None ):
    if ( not xi.carried_by( xi.cloud.a1 ) ):
      raise CloudMismatch( "the constraint must be carried by A1" )
    total = xi.mass()
    if ( total <= 1.0 ):
      raise Infeasible( "the constraint needs xi(A1) > 1", mass = total )
    if ( total <= 1.0 + DEGENERATE_MARGIN ):
      raise Infeasible( "xi(A1) is within {} of 1; the admissible set is numerically a point".format(
        DEGENERATE_MARGIN ), mass = total )
    self.xi = xi
    self.total_mass = total
    self.energy = None
    if ( riesz is not None ):
      self.energy = energy( xi, xi, riesz )
      if ( not np.isfinite( self.energy ) ):
        raise Infeasible( "the constraint must have finite energy" )

  @property
  def cloud( self ):
    return self.xi.cloud

  @property
  def weights( self ):
    return self.xi.weights

  # q * (measure normalized to unit mass)
  @classmethod
  def scaled( cls, measure, q, riesz = None ):
    return cls( measure.scaled( q / measure.mass(), label = 'xi' ), riesz )

  def __repr__( self ):
    return "CNConstraint(xi(A1)={:.6g})".format( self.total_mass )


# ----------------------------------------------------
# External fields.  Case I: given values, finite, nonnegative and zero on
# A2.  Case II: f = U^{zeta - zeta'} for a source zeta in D, zeta' its
# balayage onto A2.

class CNExternalField:

  ZERO = 'zero'
  CASE_I = 'case_one'
  CASE_II = 'case_two'

  def __init__( self, cloud, values, case, zeta = None, swept = None, relaxations = () ):
    values = np.asarray( values, dtype = float )
    if ( values.shape != ( len( cloud ), ) ):
      raise CloudMismatch( "one field value per cloud node expected" )
    self.cloud = cloud
    self.values = values
    self.case = case
    self.zeta = zeta
    self.swept = swept
    self.relaxations = list( relaxations )

  @classmethod
  def zero( cls, cloud ):
    return cls( cloud, np.zeros( len( cloud ) ), CNExternalField.ZERO )

  @classmethod
  def case_one( cls, cloud, values ):
    values = np.asarray( values, dtype = float )
    if ( not np.all( np.isfinite( values ) ) ):
      raise InfeasibleSpec( "case I fields must be finite at every node" )
    if ( np.any( values < 0.0 ) ):
      raise InfeasibleSpec( "case I fields must be nonnegative", node = int( np.argmin( values ) ) )
    if ( np.any( values[cloud.a2] != 0.0 ) ):
      raise InfeasibleSpec( "case I fields must vanish on A2" )
    return cls( cloud, values, CNExternalField.CASE_I,
      relaxations = [ CASE_I_RELAXATION, A1_CIRCLE_RELAXATION ] )

  # zeta given as a measure on cloud nodes inside D
  @classmethod
  def case_two_on_cloud( cls, zeta, riesz ):
    from condenser.cnbalayage import balayage
    swept = balayage( zeta, riesz )
    values = np.zeros( len( zeta.cloud ) )
    values[riesz.indices] = riesz.values @ ( zeta.weights - swept.weights )[riesz.indices]
    return cls( zeta.cloud, values, CNExternalField.CASE_II, zeta = zeta, swept = swept )

  # zeta given as point sources off the cloud.  With a Riesz matrix over
  # A1 and A2 the balayage is computed; otherwise the alpha = 2 closed-form
  # Green kernel gives U_g^zeta on D and zero on A2.
  @classmethod
  def case_two( cls, cloud, domain, points, weights, riesz = None ):
    from condenser.cnkernel import CNKernelKind, riesz_values
    points = domain.check_points( points )
    weights = np.asarray( weights, dtype = float )
    if ( np.any( weights < 0.0 ) or len( weights ) != len( points ) ):
      raise InfeasibleSpec( "case II sources need one nonnegative weight per point" )
    if ( not np.all( domain.contains( points ) ) ):
      raise InfeasibleSpec( "case II sources must lie in D" )
    values = np.zeros( len( cloud ) )
    swept = None
    if ( riesz is not None and len( cloud.a2 ) ):
      from condenser.cnbalayage import CNBalayageOperator
      operator = CNBalayageOperator( riesz )
      swept = operator.sweep_sources( points, weights )
      direct = riesz_values( cloud.points, points, domain.alpha, domain.dimension ) @ weights
      values = direct - riesz.values[:, riesz.positions( cloud.a2 )] @ swept.weights[cloud.a2]
    elif ( domain.alpha == 2.0 ):
      green = CNKernelKind.green( domain )
      inside = cloud.a1
      values[inside] = green.pair_values( cloud.points[inside], points ) @ weights
    else:
      raise InfeasibleSpec( "case II with alpha < 2 needs the A2 plate to sweep the sources" )
    field = cls( cloud, values, CNExternalField.CASE_II, swept = swept )
    field.sources = ( points, weights )
    return field

  def is_zero( self ):
    return not np.any( self.values )

  def describe( self ):
    return {
      'case': self.case,
      'max': float( np.max( self.values ) ) if len( self.values ) else 0.0,
      'min': float( np.min( self.values ) ) if len( self.values ) else 0.0,
      'relaxations': self.relaxations,
    }


# ----------------------------------------------------
# potentials and energies

def kernel_weights( mu, K ):
  if ( K.cloud is not None and not same_cloud( mu.cloud, K.cloud ) ):
    raise CloudMismatch( "measure and kernel matrix live on different clouds" )
  weights = mu.weights
  if ( K.cloud is None and len( weights ) <= np.max( K.indices ) ):
    raise CloudMismatch( "measure is shorter than the kernel's node range" )
  outside = np.ones( len( weights ), dtype = bool )
  outside[K.indices] = False
  if ( np.any( weights[outside] != 0.0 ) ):
    raise CloudMismatch( "measure has mass outside the kernel's nodes", kernel = str( K.kind ) )
  return weights[K.indices]

def potential( mu, K, at = None ):
  weights = kernel_weights( mu, K )
  if ( at is None ):
    return K.values @ weights
  return K.values[K.positions( at )] @ weights

def energy( mu, nu, K ):
  return float( kernel_weights( mu, K ) @ K.values @ kernel_weights( nu, K ) )

def norm( mu, K ):
  return float( np.sqrt( max( energy( mu, mu, K ), 0.0 ) ) )

def field_values( f, nodes ):
  if ( f is None ):
    return np.zeros( len( nodes ) )
  return f.values[nodes]

def weighted_potential( mu, K, f, at = None ):
  at = K.indices if at is None else np.asarray( at, dtype = int )
  return potential( mu, K, at ) + field_values( f, at )

def weighted_energy( mu, K, f ):
  plus = mu.plus_part()
  value = energy( mu, mu, K )
  if ( f is not None ):
    value += 2.0 * float( f.values @ plus.weights )
  return value

# potential of mu at arbitrary points for a kernel kind
def potential_at_points( mu, kind, points ):
  support = np.flatnonzero( mu.weights != 0.0 )
  if ( len( support ) == 0 ):
    return np.zeros( len( np.atleast_2d( points ) ) )
  return kind.pair_values( points, mu.cloud.points[support] ) @ mu.weights[support]

# xi is a CNConstraint or the measure behind one
def check_admissible( mu, xi, tolerance = None ):
  tolerance = cnconf.setting( 'MASS_TOLERANCE', tolerance )
  plus = mu.plus_part()
  excess = plus.weights - xi.weights
  excess_nodes = [ int( i ) for i in np.flatnonzero( excess > tolerance ) ]
  plus_mass = plus.mass()
  report = {
    'excess_nodes': excess_nodes,
    'max_excess': float( max( 0.0, np.max( excess ) ) ) if len( excess ) else 0.0,
    'plus_mass': plus_mass,
    'plus_mass_ok': abs( plus_mass - 1.0 ) <= tolerance,
    'tolerance': tolerance,
  }
  admissible = not excess_nodes and report['plus_mass_ok']
  if ( isinstance( mu, CNSignedMeasure ) ):
    minus_mass = mu.minus.mass()
    report['minus_mass'] = minus_mass
    report['minus_mass_ok'] = abs( minus_mass - 1.0 ) <= tolerance
    admissible = admissible and report['minus_mass_ok']
  report['admissible'] = admissible
  return admissible, report


# ----------------------------------------------------

class CNMeasureTest( TestCase ):

  def setUp( self ):
    from condenser.cnkernel import CNKernelKind, assemble
    self.cloud = CNPointCloud(
      [ [ 1.0, 0.0, 0.0 ], [ 3.0, 0.0, 0.0 ], [ 1.0, 1.0, 0.0 ], [ -1.0, 0.0, 0.0 ], [ -1.0, 2.0, 0.0 ] ],
      [ 0.5, 0.5, 0.5, 0.5, 0.5 ], [ A1, A1, A1, A2, A2 ] )
    self.K = assemble( CNKernelKind.riesz( 2.0, 3 ), self.cloud )

  def test_single_term_potential( self ):
    mu = CNMeasure.point_mass( self.cloud, 0 )
    self.assertAlmostEqual( potential( mu, self.K, [ 1 ] )[0], 0.5 )

  def test_zero_measure( self ):
    zero = CNMeasure.zero( self.cloud )
    self.assertFalse( np.any( potential( zero, self.K ) ) )
    self.assertEqual( energy( zero, zero, self.K ), 0.0 )

  def test_mutual_energy_at_unit_distance( self ):
    self.assertAlmostEqual( energy( CNMeasure.point_mass( self.cloud, 0 ),
      CNMeasure.point_mass( self.cloud, 2 ), self.K ), 1.0 )

  def test_quadratic_form_properties( self ):
    rng = np.random.default_rng( 5 )
    for _ in range( 20 ):
      mu = CNMeasure( self.cloud, rng.uniform( 0.0, 1.0, 5 ) )
      nu = CNMeasure( self.cloud, rng.uniform( 0.0, 1.0, 5 ) )
      self.assertGreater( energy( mu, mu, self.K ), 0.0 )
      self.assertAlmostEqual( energy( mu, nu, self.K ), energy( nu, mu, self.K ), places = 12 )
      self.assertLessEqual( abs( energy( mu, nu, self.K ) ), norm( mu, self.K ) * norm( nu, self.K ) * ( 1 + 1e-12 ) )
      plus = mu.weights + nu.weights
      minus = mu.weights - nu.weights
      lhs = plus @ self.K.values @ plus + minus @ self.K.values @ minus
      rhs = 2.0 * energy( mu, mu, self.K ) + 2.0 * energy( nu, nu, self.K )
      self.assertAlmostEqual( lhs / rhs, 1.0, delta = 1e-10 )

  def test_signed_energy_is_positive( self ):
    plus = CNMeasure.on_nodes( self.cloud, [ 0, 1 ], [ 0.5, 0.5 ] )
    minus = CNMeasure.on_nodes( self.cloud, [ 3, 4 ], [ 0.7, 0.3 ] )
    signed = CNSignedMeasure( plus, minus )
    self.assertGreater( energy( signed, signed, self.K ), 0.0 )
    with self.assertRaises( CloudMismatch ):
      CNSignedMeasure( minus, plus )

  def test_weighted_quantities( self ):
    mu = CNSignedMeasure( CNMeasure.on_nodes( self.cloud, [ 0, 2 ], [ 0.4, 0.6 ] ),
      CNMeasure.on_nodes( self.cloud, [ 3 ], [ 1.0 ] ) )
    zero = CNExternalField.zero( self.cloud )
    self.assertTrue( np.array_equal( weighted_potential( mu, self.K, zero ), potential( mu, self.K ) ) )
    self.assertEqual( weighted_energy( mu, self.K, zero ), energy( mu, mu, self.K ) )
    field = CNExternalField.case_one( self.cloud, [ 1.0, 2.0, 0.5, 0.0, 0.0 ] )
    at_a2 = weighted_potential( mu, self.K, field, self.cloud.a2 )
    self.assertTrue( np.array_equal( at_a2, potential( mu, self.K, self.cloud.a2 ) ) )
    self.assertAlmostEqual( weighted_energy( mu, self.K, field ),
      energy( mu, mu, self.K ) + 2.0 * ( 0.4 * 1.0 + 0.6 * 0.5 ) )
    with self.assertRaises( InfeasibleSpec ):
      CNExternalField.case_one( self.cloud, [ 1.0, 2.0, 0.5, 0.1, 0.0 ] )

  def test_admissibility( self ):
    xi = CNConstraint( CNMeasure.on_nodes( self.cloud, [ 0, 1, 2 ], [ 0.5, 0.5, 0.5 ] ) )
    shrunk = xi.xi.normalized()
    minus = CNMeasure.on_nodes( self.cloud, [ 4 ], [ 1.0 ] )
    ok, report = check_admissible( CNSignedMeasure( shrunk, minus ), xi )
    self.assertTrue( ok )
    self.assertEqual( check_admissible( CNSignedMeasure( shrunk, minus ), xi.xi ), ( ok, report ) )
    tol = report['tolerance']
    over = CNMeasure.on_nodes( self.cloud, [ 0, 1, 2 ], [ 0.5 + 2 * tol, 0.25 - tol, 0.25 - tol ] )
    ok, report = check_admissible( CNSignedMeasure( over, minus ), xi )
    self.assertFalse( ok )
    self.assertEqual( report['excess_nodes'], [ 0 ] )

  def test_constraint_needs_mass_above_one( self ):
    with self.assertRaises( Infeasible ):
      CNConstraint( CNMeasure.on_nodes( self.cloud, [ 0, 1 ], [ 0.5, 0.5 ] ) )
    with self.assertRaises( Infeasible ):
      CNConstraint( CNMeasure.on_nodes( self.cloud, [ 0, 1 ], [ 0.5, 0.5 + 1e-12 ] ) )
    with self.assertRaises( CloudMismatch ):
      CNConstraint( CNMeasure.on_nodes( self.cloud, [ 0, 3 ], [ 1.0, 1.0 ] ) )

  def test_green_kernel_rejects_a2_mass( self ):
    from condenser.cngeometry import CNDomain
    from condenser.cnkernel import CNKernelKind, assemble
    green = assemble( CNKernelKind.green( CNDomain.halfspace() ), self.cloud )
    with self.assertRaises( CloudMismatch ):
      potential( CNMeasure.point_mass( self.cloud, 3 ), green )
