# Diagnostics for a solved condenser problem.  Each check returns a
# report dict with a 'passed' flag; none of them raise for a failed
# property, they log a warning instead.  The characterizations checked:
#
#   frostman   W = U^lambda + f is >= c where lambda+ < xi, <= c where
#              lambda+ > 0, and 0 on A2
#   zone       for f = 0: U^lambda = U_g^lambda+ on D, U^lambda <= c
#              everywhere, < c off the support of xi, 0 inside A2, and the
#              support of lambda+ is that of xi when alpha < 2
#   support    lambda- lives on the boundary of D when alpha = 2 and
#              reaches into the complement when alpha < 2
#   duality    theta = q (xi - lambda), q = 1 / (xi(A1) - 1), solves the
#              unconstrained problem with field -q U_g^xi

import logging

import numpy as np

from scipy.spatial import cKDTree

from django.test import TestCase

from condenser import cnconf
from condenser.cnerrors import WrongField
from condenser.cngeometry import A1, CNDomain, CNPlateSpec, CNPointCloud, discretize_condenser
from condenser.cnmeasure import CNMeasure, CNSignedMeasure, potential, potential_at_points
from condenser.cnsolver import (CNProblem, frostman_constant, solve_green_constrained, solve_riesz_via_bridge,
  solve_unconstrained_weighted, weighted_median)

logger = logging.getLogger( __name__ )

POSITIVE_CUTOFF = 1e-10
PROBE_CLEARANCE = 2.0
SUPPORT_REACH = 4.0
MASS_AGREEMENT = 0.01


def relative( value, scale ):
  return float( value ) / max( abs( scale ), 1e-300 )

def finish( name, report, checks ):
  report['passed'] = all( checks.values() )
  for check, ok in sorted( checks.items() ):
    if ( not ok ):
      logger.warning( "%s diagnostics: %s above threshold (%s)", name, check, report.get( check ) )
  return report

# mass-weighted one-sided violations of W >= c on the slack and W <= c on
# the support, relative to |c|
def frostman_violations( W, plus, xi, c ):
  slack = np.maximum( xi - plus, 0.0 )
  below = float( slack @ np.maximum( c - W, 0.0 ) ) / max( float( slack.sum() ), 1e-300 )
  above = float( plus @ np.maximum( W - c, 0.0 ) ) / max( float( plus.sum() ), 1e-300 )
  return relative( below, c ), relative( above, c )

# A2 nodes farther from the boundary of D than their own cell radius
def interior_a2( problem ):
  a2 = problem.a2
  if ( len( a2 ) == 0 ):
    return a2
  distance = problem.domain.distance_to_boundary( problem.cloud.points[a2] )
  return a2[distance > problem.cloud.cell_radius[a2]]


# ----------------------------------------------------

def frostman_diagnostics( solution, problem = None, threshold = None ):
  problem = solution.problem if problem is None else problem
  threshold = cnconf.setting( 'DIAGNOSTIC_THRESHOLD', threshold )
  a1 = problem.a1
  plus = solution.lam.plus.weights[a1]
  xi = problem.xi.weights[a1]
  f = problem.field.values[a1]
  report = { 'threshold': threshold }
  checks = {}

  if ( problem.riesz is not None ):
    W = potential( solution.lam, problem.riesz, a1 ) + f
    c = frostman_constant( W, plus, xi )
    report['c'] = c
    if ( c is not None ):
      report['maxviol_b1'], report['maxviol_b2'] = frostman_violations( W, plus, xi, c )
      inside = interior_a2( problem )
      values = potential( solution.lam, problem.riesz, inside ) if len( inside ) else np.zeros( 0 )
      report['maxviol_A2'] = relative( np.max( np.abs( values ) ), c ) if len( values ) else 0.0
      report['a2_nodes_checked'] = int( len( inside ) )
      checks.update( {
        'maxviol_b1': report['maxviol_b1'] <= threshold,
        'maxviol_b2': report['maxviol_b2'] <= threshold,
        'maxviol_A2': report['maxviol_A2'] <= threshold,
      } )

  if ( problem.green is not None ):
    W_green = potential( solution.lam.plus, problem.green, a1 ) + f
    c_green = frostman_constant( W_green, plus, xi )
    report['c_green'] = c_green
    if ( c_green is not None ):
      report['maxviol_b1_green'], report['maxviol_b2_green'] = frostman_violations( W_green, plus, xi, c_green )
      if ( problem.riesz is None ):
        checks['maxviol_b1_green'] = report['maxviol_b1_green'] <= threshold
        checks['maxviol_b2_green'] = report['maxviol_b2_green'] <= threshold

  if ( report.get( 'c' ) is None and report.get( 'c_green' ) is None ):
    logger.warning( "frostman diagnostics: no node has slack, c is undefined" )
    checks['c_defined'] = False
  return finish( 'frostman', report, checks )


# points in a box around A1 that reaches past the boundary of D, kept only
# when they are at least PROBE_CLEARANCE cell radii from every node
def probe_points( problem, count, seed ):
  cloud = problem.cloud
  a1_points = cloud.points[problem.a1]
  pad = 0.5 * cloud.extent( problem.a1 ) + float( np.max( problem.domain.distance_to_boundary( a1_points ) ) )
  low = a1_points.min( axis = 0 ) - pad
  high = a1_points.max( axis = 0 ) + pad
  rng = np.random.default_rng( [ int( seed ), 17 ] )
  probes = rng.uniform( low, high, size = ( count, cloud.dimension ) )
  distance, nearest = cKDTree( cloud.points ).query( probes )
  return probes[distance >= PROBE_CLEARANCE * cloud.cell_radius[nearest]]

def zone_diagnostics( solution, problem = None, probes = 1000, seed = 0, threshold = None ):
  problem = solution.problem if problem is None else problem
  threshold = cnconf.setting( 'DIAGNOSTIC_THRESHOLD', threshold )
  if ( not problem.field.is_zero() ):
    raise WrongField( "zone diagnostics need f = 0", field = problem.field.case )
  problem.needs_riesz( "zone diagnostics" )
  a1 = problem.a1
  domain = problem.domain
  plus = solution.lam.plus.weights[a1]
  xi = problem.xi.weights[a1]
  riesz_potential = potential( solution.lam, problem.riesz, a1 )
  c = frostman_constant( riesz_potential, plus, xi )
  report = { 'c': c, 'threshold': threshold }
  checks = {}
  if ( c is None ):
    report['c_defined'] = False
    return finish( 'zone', report, { 'c_defined': False } )

  if ( problem.green is not None ):
    green_potential = potential( solution.lam.plus, problem.green, a1 )
    report['riesz_green_gap'] = relative( np.max( np.abs( riesz_potential - green_potential ) ), c )

  points = probe_points( problem, probes, seed )
  values = potential_at_points( solution.lam, problem.riesz.kind, points )
  inside = domain.contains( points )
  report['probes'] = int( len( points ) )
  report['probe_max_ratio'] = relative( np.max( values ), c ) if len( values ) else 0.0
  checks['probe_max_ratio'] = report['probe_max_ratio'] <= 1.0 + threshold

  # probes in D farther than SUPPORT_REACH cell radii from every node
  # carrying xi are off its support
  carriers = a1[xi > 0.0]
  off_support = np.zeros( 0 )
  if ( np.any( inside ) and len( carriers ) ):
    distance, nearest = cKDTree( problem.cloud.points[carriers] ).query( points[inside] )
    off_support = values[inside][distance > SUPPORT_REACH * problem.cloud.cell_radius[carriers][nearest]]
  report['off_support_probes'] = int( len( off_support ) )
  report['off_support_below_c'] = float( np.mean( off_support < c ) ) if len( off_support ) else 1.0
  checks['off_support_below_c'] = report['off_support_below_c'] >= 1.0 - threshold

  outside = ~inside & ( domain.distance_to_boundary( points ) > 0.0 )
  if ( np.any( outside ) ):
    distance, nearest = cKDTree( problem.cloud.points ).query( points[outside] )
    deep = domain.distance_to_boundary( points[outside] ) > problem.cloud.cell_radius[nearest]
    a2_values = values[outside][deep]
  else:
    a2_values = np.zeros( 0 )
  report['a2_probes'] = int( len( a2_values ) )
  report['a2_probe_ratio'] = relative( np.max( np.abs( a2_values ) ), c ) if len( a2_values ) else 0.0
  checks['a2_probe_ratio'] = report['a2_probe_ratio'] <= threshold

  carried = xi > 0.0
  report['support_agreement'] = float( np.mean( plus[carried] >= 1e-6 * xi[carried] ) )
  if ( domain.alpha < 2.0 ):
    checks['support_agreement'] = report['support_agreement'] >= 0.95
  return finish( 'zone', report, checks )

def support_diagnostics( solution, problem = None, threshold = None ):
  problem = solution.problem if problem is None else problem
  threshold = cnconf.setting( 'DIAGNOSTIC_THRESHOLD', threshold )
  a2 = problem.a2
  minus = solution.lam.minus.weights[a2]
  total = float( minus.sum() )
  distance = problem.domain.distance_to_boundary( problem.cloud.points[a2] ) if len( a2 ) else np.zeros( 0 )
  near = distance <= problem.cloud.cell_radius[a2]
  boundary_mass = float( minus[near].sum() )
  plus_mass = solution.lam.plus.mass()
  report = {
    'alpha': problem.domain.alpha,
    'plus_mass': plus_mass,
    'minus_mass': total,
    'mass_gap': relative( abs( total - plus_mass ), plus_mass ),
    'boundary_fraction': relative( boundary_mass, total ) if total > 0.0 else 0.0,
    'interior_mass': total - boundary_mass,
    'threshold': threshold,
  }
  if ( problem.domain.alpha == 2.0 ):
    checks = { 'boundary_fraction': report['boundary_fraction'] >= 1.0 - threshold }
  else:
    checks = { 'interior_mass': report['interior_mass'] > 0.0 }
  # balayage keeps the mass when the complement is not thin at infinity
  if ( not problem.domain.complement_thin_at_infinity ):
    checks['minus_mass'] = abs( total - plus_mass ) <= MASS_AGREEMENT * plus_mass
  return finish( 'support', report, checks )

def duality_check( problem, lam = None, threshold = None, tolerance = None ):
  threshold = cnconf.setting( 'DIAGNOSTIC_THRESHOLD', threshold )
  if ( not problem.field.is_zero() ):
    raise WrongField( "the duality check needs f = 0", field = problem.field.case )
  a1 = problem.a1
  G = problem.green.values
  if ( lam is None ):
    lam = solve_green_constrained( problem, tolerance = tolerance )
  if ( hasattr( lam, 'lam' ) ):
    lam = lam.green_minimizer if lam.green_minimizer is not None else lam.lam.plus
  lam_weights = lam.weights[a1]
  xi = problem.xi.weights[a1]
  q = 1.0 / ( problem.constraint.total_mass - 1.0 )
  theta = q * ( xi - lam_weights )
  f0 = -q * ( G @ xi )
  W = G @ theta + f0
  carried = theta > POSITIVE_CUTOFF
  eta = -weighted_median( W[carried], theta[carried] )
  objective = float( theta @ G @ theta + 2.0 * f0 @ theta )
  optimum = solve_unconstrained_weighted( a1, problem.green, f0, problem.cloud, tolerance = tolerance )
  best = optimum.meta['objective']
  report = {
    'q': q,
    'theta_mass': float( theta.sum() ),
    'eta': eta,
    'maxviol_Wsc1': relative( np.max( np.abs( W[carried] + eta ) ), eta ),
    'maxviol_Wsc2': relative( max( 0.0, float( np.max( -eta - W ) ) ), eta ),
    'objective': objective,
    'unconstrained_objective': best,
    'objective_gap': relative( abs( objective - best ), best ),
    'threshold': threshold,
  }
  checks = {
    'theta_mass': abs( report['theta_mass'] - 1.0 ) <= 1e-8,
    'objective_gap': report['objective_gap'] <= threshold,
    'maxviol_Wsc1': report['maxviol_Wsc1'] <= threshold,
    'maxviol_Wsc2': report['maxviol_Wsc2'] <= threshold,
  }
  return finish( 'duality', report, checks )

def verify_all( solution, problem = None, probes = 1000, seed = 0, threshold = None ):
  problem = solution.problem if problem is None else problem
  reports = { 'frostman': frostman_diagnostics( solution, problem, threshold ) }
  if ( problem.field.is_zero() and problem.riesz is not None ):
    reports['zone'] = zone_diagnostics( solution, problem, probes, seed, threshold )
  if ( len( problem.a2 ) ):
    reports['support'] = support_diagnostics( solution, problem, threshold )
  if ( problem.field.is_zero() and problem.green is not None ):
    reports['duality'] = duality_check( problem, solution, threshold )
  reports['passed'] = all( report['passed'] for report in reports.values() )
  return reports


# ----------------------------------------------------

class CNVerifyTest( TestCase ):

  def setUp( self ):
    self.halfspace = CNDomain.halfspace( 3, 2.0 )
    cloud = discretize_condenser( self.halfspace, CNPlateSpec.disc_series( 1, 50 ),
      CNPlateSpec.complement_shell( 800 ), seed = 3 )
    xi = CNMeasure.on_nodes( cloud, cloud.a1, 1.5 / len( cloud.a1 ) )
    self.problem = CNProblem.create( self.halfspace, cloud, xi )
    self.solution = solve_riesz_via_bridge( self.problem, tolerance = 1e-10 )

  def test_symmetric_pair_has_no_violation( self ):
    cloud = CNPointCloud( [ [ 1.0, 1.0, 0.0 ], [ 1.0, -1.0, 0.0 ] ], [ 0.5, 0.5 ], [ A1, A1 ] )
    problem = CNProblem.create( self.halfspace, cloud, CNMeasure( cloud, [ 1.0, 1.0 ] ) )
    minimizer = solve_green_constrained( problem )
    from condenser.cnsolver import CNSolution
    solution = CNSolution( problem, CNSignedMeasure( minimizer, CNMeasure.zero( cloud ) ), minimizer )
    report = frostman_diagnostics( solution )
    self.assertLess( report['maxviol_b1_green'], 1e-9 )
    self.assertLess( report['maxviol_b2_green'], 1e-9 )
    self.assertTrue( report['passed'] )

  def test_green_conditions_hold_at_the_minimizer( self ):
    report = frostman_diagnostics( self.solution )
    self.assertLess( report['maxviol_b1_green'], 1e-6 )
    self.assertLess( report['maxviol_b2_green'], 1e-6 )
    self.assertGreater( report['c_green'], 0.0 )

  def test_scrambled_solution_fails( self ):
    a1 = self.problem.a1
    rng = np.random.default_rng( 0 )
    plus = self.solution.lam.plus.weights.copy()
    plus[a1] = 0.0
    plus[a1[rng.permutation( len( a1 ) )[:len( a1 ) // 2]]] = 2.0 / len( a1 )
    from condenser.cnsolver import CNSolution
    scrambled = CNSolution( self.problem, CNSignedMeasure( CNMeasure( self.problem.cloud, plus ),
      self.solution.lam.minus ), None )
    good = frostman_diagnostics( self.solution )
    bad = frostman_diagnostics( scrambled )
    self.assertGreater( bad['maxviol_b1_green'] + bad['maxviol_b2_green'],
      100.0 * ( good['maxviol_b1_green'] + good['maxviol_b2_green'] ) + 1e-3 )

  def test_support_on_boundary( self ):
    report = support_diagnostics( self.solution )
    self.assertGreaterEqual( report['boundary_fraction'], 0.98 )
    self.assertLessEqual( report['boundary_fraction'], 1.0 + 1e-12 )

  def test_zone_report( self ):
    report = zone_diagnostics( self.solution, probes = 300, seed = 4 )
    self.assertGreater( report['probes'], 0 )
    self.assertIn( 'support_agreement', report )
    self.assertLessEqual( report['probe_max_ratio'], 1.02 )

  def test_zone_needs_zero_field( self ):
    from condenser.cnmeasure import CNExternalField
    cloud = self.problem.cloud
    values = np.zeros( len( cloud ) )
    values[cloud.a1] = 0.1
    problem = CNProblem( self.halfspace, cloud, self.problem.constraint,
      CNExternalField.case_one( cloud, values ), self.problem.riesz, self.problem.green )
    with self.assertRaises( WrongField ):
      zone_diagnostics( self.solution, problem )

  def test_duality( self ):
    report = duality_check( self.problem, self.solution, tolerance = 1e-10 )
    self.assertAlmostEqual( report['theta_mass'], 1.0, places = 10 )
    self.assertAlmostEqual( report['q'], 2.0, places = 10 )
    self.assertLess( report['maxviol_Wsc2'], 1e-6 )
    self.assertGreaterEqual( report['objective'], report['unconstrained_objective'] - 1e-9 * abs( report['unconstrained_objective'] ) )
    self.assertLess( report['maxviol_Wsc1'], 1e-6 )
    self.assertTrue( report['passed'] )

  def test_duality_rejects_a_flat_measure( self ):
    a1 = self.problem.a1
    flat = CNMeasure.on_nodes( self.problem.cloud, a1, 1.0 / len( a1 ) )
    report = duality_check( self.problem, flat, tolerance = 1e-10 )
    self.assertAlmostEqual( report['theta_mass'], 1.0, places = 10 )
    self.assertGreater( report['maxviol_Wsc1'], 0.1 )
    self.assertFalse( report['passed'] )

  def test_swept_mass_matches( self ):
    report = support_diagnostics( self.solution )
    self.assertAlmostEqual( report['plus_mass'], 1.0, places = 8 )
    self.assertLessEqual( report['mass_gap'], MASS_AGREEMENT )
    self.assertTrue( report['passed'] )

  def test_lost_minus_mass_fails( self ):
    from condenser.cnsolver import CNSolution
    lam = self.solution.lam
    short = CNSolution( self.problem, CNSignedMeasure( lam.plus, lam.minus.scaled( 0.9 ) ), lam.plus )
    report = support_diagnostics( short )
    self.assertGreater( report['mass_gap'], 0.05 )
    self.assertFalse( report['passed'] )

  def test_off_support_potential_below_c( self ):
    report = zone_diagnostics( self.solution, probes = 2000, seed = 5 )
    self.assertGreater( report['off_support_probes'], 0 )
    self.assertEqual( report['off_support_below_c'], 1.0 )

  def test_frostman_riesz_side( self ):
    report = frostman_diagnostics( self.solution )
    self.assertLessEqual( report['maxviol_b1'], report['threshold'] )
    self.assertLessEqual( report['maxviol_b2'], report['threshold'] )
    self.assertLessEqual( report['maxviol_A2'], report['threshold'] )
    self.assertGreater( report['a2_nodes_checked'], 0 )
    self.assertAlmostEqual( report['c'] / report['c_green'], 1.0, delta = 0.02 )

  def test_perturbed_minimizer_fails_frostman( self ):
    cloud = CNPointCloud( [ [ 1.0, 5.0, 0.0 ], [ 1.0, -5.0, 0.0 ] ], [ 0.5, 0.5 ], [ A1, A1 ] )
    problem = CNProblem.create( self.halfspace, cloud, CNMeasure( cloud, [ 1.0, 1.0 ] ) )
    from condenser.cnsolver import CNSolution
    reports = []
    for weights in ( [ 0.5, 0.5 ], [ 0.55, 0.45 ] ):
      plus = CNMeasure( cloud, weights )
      reports.append( frostman_diagnostics( CNSolution( problem, CNSignedMeasure( plus, CNMeasure.zero( cloud ) ),
        plus ) ) )
    exact, moved = reports
    self.assertTrue( exact['passed'] )
    self.assertGreaterEqual( moved['maxviol_b2_green'], 5.0 * moved['threshold'] )
    self.assertFalse( moved['passed'] )
