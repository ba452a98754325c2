# This file defines the constrained condenser problem and its solvers.
#
# The problem: plates A1 (in D) and A2 (the complement of D), a constraint
# xi >= 0 on A1 with xi(A1) > 1, an external field f, and unit mass on
# both plates.  Its Riesz form minimizes over signed measures
#
#   ||mu+ - mu-||^2 + 2 <f, mu+>,   0 <= mu+ <= xi,   mu+(A1) = mu-(A2) = 1
#
# and its Green form minimizes nu^T G nu + 2 <f, nu> over 0 <= nu <= xi,
# nu(A1) = 1.  The bridge solve finds the Green minimizer and sweeps it
# onto A2; the direct solve works on the signed problem itself and serves
# as the cross-check.

import logging

import numpy as np

from django.test import TestCase

from condenser import cnconf
from condenser.cnbalayage import balayage, equilibrium_measure, sweep_through_green
from condenser.cnerrors import CloudMismatch, Infeasible, InvalidSigma
from condenser.cngeometry import A1, CNDomain, CNPlateSpec, CNPointCloud, discretize_condenser
from condenser.cnkernel import CNKernelKind, assemble
from condenser.cnmeasure import (CNConstraint, CNExternalField, CNMeasure, CNSignedMeasure,
  check_admissible, energy, potential, weighted_energy)
from condenser.cnqp import CNQuadraticProgram

logger = logging.getLogger( __name__ )

# agreement expected between the bridge and direct paths
AGREEMENT = 0.02
SLACK_CUTOFF = 1e-10


# ----------------------------------------------------

class CNProblem:

  def __init__( self, domain, cloud, constraint, field, riesz = None, green = None, name = '' ):
    if ( constraint.cloud is not cloud or field.cloud is not cloud ):
      raise CloudMismatch( "constraint, field and problem must share one cloud" )
    if ( len( cloud.a1 ) == 0 ):
      raise Infeasible( "the A1 plate has no nodes" )
    self.domain = domain
    self.cloud = cloud
    self.constraint = constraint
    self.field = field
    self.riesz = riesz
    self.green = green
    self.name = name
    self.meta = {}

  # Assemble whatever kernel matrices were not supplied.  The Riesz matrix
  # needs A2 nodes to be useful; the Green matrix for alpha < 2 is swept
  # onto them.
  @classmethod
  def create( cls, domain, cloud, xi, field = None, riesz = None, green = None,
              beta = None, threads = None, green_method = None, name = '' ):
    if ( riesz is None and len( cloud.a2 ) ):
      riesz = assemble( CNKernelKind.riesz( domain.alpha, domain.dimension ), cloud, beta = beta, threads = threads )
    if ( green is None ):
      kind = CNKernelKind.green( domain )
      if ( green_method == 'balayage' or not kind.has_closed_form() ):
        from condenser.cnbalayage import assemble_green_by_balayage
        green = assemble_green_by_balayage( kind, cloud, beta = beta, threads = threads, riesz = riesz )
      else:
        green = assemble( kind, cloud, beta = beta, threads = threads )
    constraint = xi if isinstance( xi, CNConstraint ) else CNConstraint( xi, riesz )
    field = CNExternalField.zero( cloud ) if field is None else field
    return cls( domain, cloud, constraint, field, riesz, green, name )

  def __repr__( self ):
    return "CNProblem({}{}, xi(A1)={:.6g}, field={})".format(
      self.name + ": " if self.name else "", self.cloud, self.constraint.total_mass, self.field.case )

  @property
  def a1( self ):
    return self.cloud.a1

  @property
  def a2( self ):
    return self.cloud.a2

  @property
  def xi( self ):
    return self.constraint.xi

  def needs_riesz( self, operation ):
    if ( self.riesz is None ):
      raise CloudMismatch( "{} needs the Riesz matrix over A1 and A2".format( operation ) )

  # The largest-weight nodes whose xi mass reaches 1, with xi restricted to
  # them and normalized; admissible since that mass is at least 1.
  def admissible_start( self ):
    weights = self.xi.weights[self.a1]
    order = np.argsort( -weights, kind = 'stable' )
    reach = int( np.searchsorted( np.cumsum( weights[order] ), 1.0 ) ) + 1
    chosen = order[:min( reach, len( order ) )]
    start = np.zeros( len( self.a1 ) )
    start[chosen] = weights[chosen] / weights[chosen].sum()
    return start

  def green_program( self, label = 'green' ):
    a1 = self.a1
    return CNQuadraticProgram( self.green.block( a1, a1 ), self.field.values[a1],
      upper = self.xi.weights[a1], groups = [ np.arange( len( a1 ) ) ], targets = [ 1.0 ], label = label )

  # the signed problem as one QP over (mu+ on A1, mu- on A2)
  def signed_program( self, minus_cap = None, label = 'signed' ):
    self.needs_riesz( "the signed problem" )
    a1, a2 = self.a1, self.a2
    n1 = len( a1 )
    K = self.riesz
    Q = np.block( [
      [ K.block( a1, a1 ), -K.block( a1, a2 ) ],
      [ -K.block( a2, a1 ), K.block( a2, a2 ) ] ] )
    b = np.concatenate( ( self.field.values[a1], np.zeros( len( a2 ) ) ) )
    minus_cap = np.full( len( a2 ), np.inf ) if minus_cap is None else minus_cap
    upper = np.concatenate( ( self.xi.weights[a1], minus_cap ) )
    groups = [ np.arange( n1 ), np.arange( n1, n1 + len( a2 ) ) ]
    return CNQuadraticProgram( Q, b, upper = upper, groups = groups, targets = [ 1.0, 1.0 ], label = label )

  def signed_measure( self, x ):
    n1 = len( self.a1 )
    plus = CNMeasure.on_nodes( self.cloud, self.a1, np.maximum( x[:n1], 0.0 ), 'lambda+' )
    minus = CNMeasure.on_nodes( self.cloud, self.a2, np.maximum( x[n1:], 0.0 ), 'lambda-' )
    return CNSignedMeasure( plus, minus )

  def describe( self ):
    return {
      'name': self.name,
      'domain': self.domain.describe(),
      'nodes': { 'A1': int( len( self.a1 ) ), 'A2': int( len( self.a2 ) ) },
      'xi_mass': self.constraint.total_mass,
      'field': self.field.describe(),
      'truncated': bool( self.cloud.truncated ),
      'truncation_radius': self.cloud.truncation_radius,
    }


# ----------------------------------------------------

class CNSolution:

  def __init__( self, problem, lam, green_minimizer = None, objective_alpha = None, objective_green = None,
                frostman_c = None, kkt = None, meta = None ):
    self.problem = problem
    self.lam = lam
    self.green_minimizer = green_minimizer
    self.objective_alpha = objective_alpha
    self.objective_green = objective_green
    self.frostman_c = frostman_c
    self.kkt = kkt or {}
    self.meta = meta or {}
    self.traces = {}

  def __repr__( self ):
    return "CNSolution(G_alpha={}, G_g={}, c={})".format( self.objective_alpha, self.objective_green, self.frostman_c )

  def describe( self ):
    return {
      'objective_alpha': self.objective_alpha,
      'objective_green': self.objective_green,
      'frostman_c': self.frostman_c,
      'plus_mass': self.lam.plus.mass(),
      'minus_mass': self.lam.minus.mass(),
      'kkt': self.kkt,
      'meta': self.meta,
    }


def weighted_median( values, weights ):
  order = np.argsort( values, kind = 'stable' )
  cumulative = np.cumsum( weights[order] )
  return float( values[order][np.searchsorted( cumulative, 0.5 * cumulative[-1] )] )

# The constant c of the Frostman conditions: the (xi - lambda+)-weighted
# median of W over nodes that carry lambda+ mass and still have slack;
# over all slack nodes when none does.
def frostman_constant( W, plus, xi ):
  slack = xi - plus
  chosen = ( plus > SLACK_CUTOFF ) & ( slack > SLACK_CUTOFF )
  if ( not np.any( chosen ) ):
    chosen = slack > SLACK_CUTOFF
  if ( not np.any( chosen ) ):
    return None
  return weighted_median( W[chosen], slack[chosen] )


# ----------------------------------------------------
# solvers

def solve_green_constrained( problem, start = None, tolerance = None ):
  a1 = problem.a1
  if ( start is None ):
    start = problem.admissible_start()
  else:
    start = np.asarray( start.weights[a1] if isinstance( start, CNMeasure ) else start, dtype = float )
  ok, report = check_admissible( CNMeasure.on_nodes( problem.cloud, a1, start ), problem.constraint )
  if ( not ok ):
    logger.debug( "starting point not admissible (%s); it is projected first", report )
  qp = problem.green_program()
  result = qp.solve( start, tolerance = tolerance )
  minimizer = CNMeasure.on_nodes( problem.cloud, a1, result.x, 'lambda+' )
  minimizer.meta.update( {
    'objective': result.objective,
    'residual': result.residual,
    'iterations': result.iterations,
    'trace': result.trace,
  } )
  logger.info( "green problem solved: objective %.10g, KKT residual %.3g, %d iterations",
    result.objective, result.residual, result.iterations )
  return minimizer

def solve_riesz_via_bridge( problem, tolerance = None ):
  problem.needs_riesz( "the bridge solve" )
  plus = solve_green_constrained( problem, tolerance = tolerance )
  minus = sweep_through_green( plus, problem.riesz, problem.green )
  minus.label = 'lambda-'
  lam = CNSignedMeasure( plus, minus )
  objective_alpha = weighted_energy( lam, problem.riesz, problem.field )
  objective_green = weighted_energy( plus, problem.green, problem.field )
  gap = abs( objective_alpha - objective_green ) / ( 1.0 + abs( objective_green ) )
  if ( gap > AGREEMENT ):
    logger.warning( "bridge objectives differ by %.3g (G_alpha %.8g, G_g %.8g)", gap, objective_alpha, objective_green )
  a1 = problem.a1
  W_green = potential( plus, problem.green, a1 ) + problem.field.values[a1]
  c = frostman_constant( W_green, plus.weights[a1], problem.xi.weights[a1] )
  solution = CNSolution( problem, lam, plus, objective_alpha, objective_green, c, {
    'green_residual': plus.meta['residual'],
    'bridge_gap': gap,
    'swept_mass': minus.mass(),
    'exact_projection': minus.meta.get( 'exact_projection', False ),
  }, { 'path': 'bridge', 'iterations': plus.meta['iterations'] } )
  solution.traces['green'] = plus.meta['trace']
  return solution

# Block alternation between mu+ (capped simplex on A1) and mu- (simplex on
# A2), each block solved exactly, followed by a joint active-set solve.
def solve_riesz_direct( problem, tolerance = None, rounds = 50 ):
  problem.needs_riesz( "the direct solve" )
  tolerance = cnconf.setting( 'TOLERANCE', tolerance )
  K = problem.riesz
  a1, a2 = problem.a1, problem.a2
  K11, K12, K22 = K.block( a1, a1 ), K.block( a1, a2 ), K.block( a2, a2 )
  f1 = problem.field.values[a1]
  xi = problem.xi.weights[a1]

  def joint( p, m ):
    return float( p @ K11 @ p - 2.0 * p @ K12 @ m + m @ K22 @ m + 2.0 * f1 @ p )

  p = problem.admissible_start()
  m = equilibrium_measure( a2, K, tolerance = tolerance )[0].weights[a2]
  log = [ joint( p, m ) ]
  joint_program = problem.signed_program( label = 'signed' )
  limit = tolerance * joint_program.scale
  block_converged = False
  for k in range( rounds ):
    p = CNQuadraticProgram( K11, f1 - K12 @ m, upper = xi, groups = [ np.arange( len( a1 ) ) ],
      targets = [ 1.0 ], label = 'plus block' ).solve( p, tolerance = tolerance ).x
    log.append( joint( p, m ) )
    m = CNQuadraticProgram( K22, -K12.T @ p, groups = [ np.arange( len( a2 ) ) ],
      targets = [ 1.0 ], label = 'minus block' ).solve( m, tolerance = tolerance ).x
    log.append( joint( p, m ) )
    logger.debug( "block round %d: objective %.12g", k + 1, log[-1] )
    if ( joint_program.residual( np.concatenate( ( p, m ) ) ) <= limit ):
      block_converged = True
      break
    if ( log[-3] - log[-1] <= 1e-3 * limit ):
      break
  result = joint_program.solve( np.concatenate( ( p, m ) ), tolerance = tolerance )
  lam = problem.signed_measure( result.x )
  W = potential( lam, K, a1 ) + f1
  c = frostman_constant( W, result.x[:len( a1 )], xi )
  logger.info( "direct signed solve: objective %.10g after %d block rounds (block phase %s)",
    result.objective, len( log ) // 2, "converged" if block_converged else "stalled" )
  solution = CNSolution( problem, lam, lam.plus, result.objective, None, c, {
    'residual': result.residual,
    'block_converged': block_converged,
    'block_rounds': ( len( log ) - 1 ) // 2,
  }, { 'path': 'direct', 'block_log': log, 'iterations': result.iterations } )
  solution.traces['direct'] = result.trace
  return solution

# minimizer of nu^T G nu + 2 <f0, nu> over probability measures on 'nodes'
def solve_unconstrained_weighted( nodes, green, f0, cloud = None, tolerance = None ):
  nodes = np.asarray( nodes, dtype = int )
  f0 = np.asarray( f0, dtype = float )
  if ( f0.shape != ( len( nodes ), ) or not np.all( np.isfinite( f0 ) ) ):
    raise Infeasible( "f0 must be finite with one value per node" )
  qp = CNQuadraticProgram( green.block( nodes, nodes ), f0, groups = [ np.arange( len( nodes ) ) ],
    targets = [ 1.0 ], label = 'unconstrained' )
  result = qp.solve( tolerance = tolerance )
  measure = CNMeasure.on_nodes( green.cloud if cloud is None else cloud, nodes, result.x, 'theta' )
  measure.meta.update( { 'objective': result.objective, 'residual': result.residual } )
  return measure

# The problem with the extra cap mu- <= sigma- on A2.  sigma- has to
# dominate the balayage of xi.
def solve_signed_constraint( problem, sigma_minus, tolerance = None, reference = None ):
  problem.needs_riesz( "the signed-constraint solve" )
  a2 = problem.a2
  mass_tolerance = cnconf.setting( 'MASS_TOLERANCE' )
  xi_swept = balayage( problem.xi, problem.riesz ).weights[a2]
  sigma = sigma_minus.weights[a2]
  short = sigma < xi_swept - ( mass_tolerance + 1e-6 * xi_swept )
  if ( np.any( short ) ):
    node = int( a2[np.flatnonzero( short )[0]] )
    raise InvalidSigma( "sigma- falls below the balayage of xi", node = node )
  result = problem.signed_program( minus_cap = sigma, label = 'sigma' ).solve( tolerance = tolerance )
  lam = problem.signed_measure( result.x )
  reference = solve_riesz_direct( problem, tolerance ) if reference is None else reference
  difference = lam.weights - reference.lam.weights
  norm = np.sqrt( max( energy( reference.lam, reference.lam, problem.riesz ), 1e-300 ) )
  optimum_gap = abs( result.objective - reference.objective_alpha ) / ( 1.0 + abs( reference.objective_alpha ) )
  minimizer_gap = float( np.sqrt( max( difference @ problem.riesz.values @ difference, 0.0 ) ) ) / norm
  if ( optimum_gap > AGREEMENT or minimizer_gap > AGREEMENT ):
    logger.warning( "sigma-constrained solution differs from the xi-only one (optimum %.3g, minimizer %.3g)",
      optimum_gap, minimizer_gap )
  solution = CNSolution( problem, lam, lam.plus, result.objective, None, reference.frostman_c, {
    'residual': result.residual,
    'optimum_gap': optimum_gap,
    'minimizer_gap': minimizer_gap,
  }, { 'path': 'sigma' } )
  solution.traces['sigma'] = result.trace
  return solution


# ----------------------------------------------------

class CNSolverTest( TestCase ):

  def setUp( self ):
    self.halfspace = CNDomain.halfspace( 3, 2.0 )

  def pair_problem( self, xi ):
    cloud = CNPointCloud( [ [ 1.0, 1.0, 0.0 ], [ 1.0, -1.0, 0.0 ] ], [ 0.5, 0.5 ], [ A1, A1 ] )
    return CNProblem.create( self.halfspace, cloud, CNMeasure( cloud, xi ) )

  def disc_problem( self, with_a2 = False ):
    a2_spec = CNPlateSpec.complement_shell( 800 ) if with_a2 else None
    cloud = discretize_condenser( self.halfspace, CNPlateSpec.disc_series( 1, 50 ), a2_spec, seed = 3 )
    xi = CNMeasure.on_nodes( cloud, cloud.a1, 1.5 / len( cloud.a1 ) )
    return CNProblem.create( self.halfspace, cloud, xi )

  def random_admissible( self, problem, rng ):
    n = len( problem.a1 )
    box = CNQuadraticProgram( np.eye( n ), np.zeros( n ), upper = problem.xi.weights[problem.a1],
      groups = [ np.arange( n ) ], targets = [ 1.0 ] )
    return box.project( rng.uniform( 0.0, 3.0 / n, n ) )

  def test_symmetric_pair( self ):
    minimizer = solve_green_constrained( self.pair_problem( [ 1.0, 1.0 ] ) )
    self.assertTrue( np.allclose( minimizer.weights, [ 0.5, 0.5 ], atol = 1e-9 ) )

  def test_tight_constraint( self ):
    minimizer = solve_green_constrained( self.pair_problem( [ 0.7, 0.3 + 1e-6 ] ) )
    self.assertTrue( np.allclose( minimizer.weights, [ 0.7, 0.3 ], atol = 2e-6 ) )

  def test_degenerate_constraint( self ):
    with self.assertRaises( Infeasible ):
      self.pair_problem( [ 0.5, 0.5 + 1e-11 ] )

  def test_unique_from_random_starts( self ):
    problem = self.disc_problem()
    rng = np.random.default_rng( 9 )
    first = solve_green_constrained( problem, tolerance = 1e-10 ).weights
    self.assertTrue( np.all( first <= problem.xi.weights + 1e-12 ) )
    self.assertAlmostEqual( first.sum(), 1.0, places = 10 )
    for _ in range( 5 ):
      start = self.random_admissible( problem, rng )
      other = solve_green_constrained( problem, start, tolerance = 1e-10 ).weights
      difference = ( other - first )[problem.a1]
      self.assertLess( float( difference @ problem.green.values @ difference ), 1e-10 )

  def test_variational_inequality( self ):
    problem = self.disc_problem()
    lam = solve_green_constrained( problem, tolerance = 1e-10 ).weights[problem.a1]
    W = problem.green.values @ lam
    rng = np.random.default_rng( 1 )
    for _ in range( 100 ):
      nu = self.random_admissible( problem, rng )
      self.assertGreaterEqual( float( W @ ( nu - lam ) ), -1e-8 * problem.green.scale )

  def test_bridge_and_direct_agree( self ):
    problem = self.disc_problem( with_a2 = True )
    bridge = solve_riesz_via_bridge( problem )
    self.assertLess( bridge.kkt['bridge_gap'], 0.02 )
    self.assertAlmostEqual( bridge.lam.minus.mass(), 1.0, delta = 0.01 )
    self.assertGreater( bridge.frostman_c, 0.0 )
    direct = solve_riesz_direct( problem )
    log = direct.meta['block_log']
    for earlier, later in zip( log, log[1:] ):
      self.assertLessEqual( later, earlier + 1e-9 * abs( earlier ) )
    self.assertAlmostEqual( direct.objective_alpha / bridge.objective_alpha, 1.0, delta = 0.02 )
    self.assertAlmostEqual( direct.lam.minus.mass(), 1.0, places = 10 )

  def test_unconstrained_pair( self ):
    problem = self.pair_problem( [ 1.0, 1.0 ] )
    theta = solve_unconstrained_weighted( problem.a1, problem.green, [ 0.3, 0.3 ] )
    self.assertTrue( np.allclose( theta.weights, [ 0.5, 0.5 ], atol = 1e-9 ) )

  def test_signed_constraint( self ):
    problem = self.disc_problem( with_a2 = True )
    reference = solve_riesz_direct( problem )
    swept = balayage( problem.xi, problem.riesz )
    loose = solve_signed_constraint( problem, swept.scaled( 10.0 ), reference = reference )
    self.assertLess( loose.kkt['optimum_gap'], 1e-6 )
    exact = solve_signed_constraint( problem, swept, reference = reference )
    self.assertLess( exact.kkt['optimum_gap'], 1e-4 )
    self.assertTrue( np.all( exact.lam.minus.weights <= swept.weights + 1e-12 ) )
    node = int( problem.a2[np.argmax( swept.weights[problem.a2] )] )
    short = swept.weights.copy()
    short[node] *= 0.5
    with self.assertRaises( InvalidSigma ) as raised:
      solve_signed_constraint( problem, CNMeasure( problem.cloud, short ), reference = reference )
    self.assertEqual( raised.exception.node, node )

  def test_frostman_constant( self ):
    W = np.array( [ 1.0, 2.0, 3.0, 10.0 ] )
    plus = np.array( [ 0.5, 0.2, 0.3, 0.0 ] )
    xi = np.array( [ 0.5, 0.6, 0.6, 0.5 ] )
    self.assertEqual( frostman_constant( W, plus, xi ), 2.0 )
