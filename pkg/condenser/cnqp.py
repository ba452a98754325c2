# This file holds the quadratic programming engine every solver in the
# package runs on:
#
#   minimize   x^T Q x + 2 b^T x
#   subject to lower <= x <= upper          (upper may be +inf)
#              sum( x[g] ) = target_g       for each group g
#
# Q is dense symmetric positive definite.  Groups are disjoint index
# arrays; variables in no group only see their bounds.  The feasible sets
# that show up are simplices, capped simplices and products of them.
#
# The method is a projected gradient phase (Barzilai-Borwein step, exact
# line search along the projected direction, so the objective never
# increases) followed by a primal active-set polish which solves the
# equality-constrained problem on the free variables exactly and moves
# bounds in and out of the working set one at a time.

import logging

import numpy as np

from numpy.linalg import LinAlgError
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq

from django.test import TestCase

from condenser import cnconf
from condenser.cnerrors import Infeasible, NotPositiveDefinite, SolverDiverged

logger = logging.getLogger( __name__ )

GRADIENT_REFRESH = 50
RESIDUAL_EVERY = 25
STEP_MIN = 1e-12
STEP_MAX = 1e12


# ----------------------------------------------------

class CNQPResult:

  def __init__( self, x, objective, residual, iterations, converged, trace, label = '' ):
    self.x = x
    self.objective = objective
    self.residual = residual
    self.iterations = iterations
    self.converged = converged
    self.trace = trace
    self.label = label

  def __repr__( self ):
    return "CNQPResult({}objective={:.10g}, residual={:.3g}, iterations={})".format(
      self.label + ", " if self.label else "", self.objective, self.residual, self.iterations )


# ----------------------------------------------------

class CNQuadraticProgram:

  def __init__( self, Q, b, lower = None, upper = None, groups = (), targets = (), label = '' ):
    self.Q = np.asarray( Q, dtype = float )
    self.b = np.asarray( b, dtype = float )
    size = len( self.b )
    self.lower = np.zeros( size ) if lower is None else np.broadcast_to( np.asarray( lower, dtype = float ), ( size, ) ).copy()
    self.upper = np.full( size, np.inf ) if upper is None else np.broadcast_to( np.asarray( upper, dtype = float ), ( size, ) ).copy()
    self.groups = [ np.asarray( g, dtype = int ) for g in groups ]
    self.targets = [ float( t ) for t in targets ]
    self.label = label
    self.grouped = np.full( size, -1 )
    for k, g in enumerate( self.groups ):
      self.grouped[g] = k
    self.scale = float( np.max( np.diag( self.Q ) ) ) if size else 1.0
    self.check_feasible()

  def __len__( self ):
    return len( self.b )

  def check_feasible( self ):
    if ( np.any( self.lower > self.upper ) ):
      raise Infeasible( "a lower bound exceeds its upper bound", problem = self.label )
    for k, ( g, target ) in enumerate( zip( self.groups, self.targets ) ):
      low = float( self.lower[g].sum() )
      high = float( self.upper[g].sum() )
      if ( not low <= target <= high ):
        raise Infeasible( "group target is outside what the bounds allow", problem = self.label,
          group = k, target = target, low = low, high = high )

  def gradient( self, x ):
    return self.Q @ x + self.b

  def objective( self, x ):
    return float( x @ ( self.gradient( x ) + self.b ) )

  # Euclidean projection: per group x = clip( y - tau, lower, upper ) with
  # the shift tau chosen so the group sums to its target
  def project( self, y ):
    x = np.clip( y, self.lower, self.upper )
    for g, target in zip( self.groups, self.targets ):
      x[g] = project_group( y[g], self.lower[g], self.upper[g], target )
    return x

  # D * || x - P( x - (Qx + b) / D ) ||_inf, zero exactly at the optimum
  def residual( self, x, h = None ):
    h = self.gradient( x ) if h is None else h
    return self.scale * float( np.max( np.abs( x - self.project( x - h / self.scale ) ) ) ) if len( x ) else 0.0

  def solve( self, x0 = None, tolerance = None, max_iterations = None, pg_iterations = None ):
    tolerance = cnconf.setting( 'TOLERANCE', tolerance )
    max_iterations = int( cnconf.setting( 'MAX_ITERATIONS', max_iterations ) )
    pg_iterations = int( cnconf.setting( 'PG_ITERATIONS', pg_iterations ) )
    limit = tolerance * self.scale

    start = self.feasible_start() if x0 is None else self.project( np.asarray( x0, dtype = float ) )
    x, trace, iterations = self.projected_gradient( start, limit, pg_iterations )
    residual = self.residual( x )
    if ( residual > limit ):
      polished, steps = self.polish( x, limit, max_iterations, trace, iterations )
      iterations += steps
      x = polished
      residual = self.residual( x )
    value = self.objective( x )
    trace.append( ( iterations, value, residual ) )
    converged = residual <= limit
    if ( not converged ):
      raise SolverDiverged( "QP did not reach its tolerance", problem = self.label,
        residual = residual, limit = limit, iterations = iterations )
    logger.debug( "qp %s: objective %.10g, residual %.3g after %d iterations",
      self.label, value, residual, iterations )
    return CNQPResult( x, value, residual, iterations, converged, trace, self.label )

  # the projection of a uniform point is a feasible point
  def feasible_start( self ):
    guess = np.zeros( len( self ) )
    for g, target in zip( self.groups, self.targets ):
      guess[g] = target / float( len( g ) )
    return self.project( guess )

  def projected_gradient( self, x, limit, iterations ):
    Q = self.Q
    h = self.gradient( x )
    step = 1.0 / self.scale
    trace = [ ( 0, float( x @ ( h + self.b ) ), self.residual( x, h ) ) ]
    done = 0
    for k in range( 1, iterations + 1 ):
      done = k
      y = self.project( x - step * h )
      d = y - x
      if ( not np.any( d ) ):
        break
      Qd = Q @ d
      curvature = float( d @ Qd )
      slope = float( h @ d )
      if ( slope >= 0.0 ):
        break
      theta = 1.0 if curvature <= 0.0 else min( 1.0, -slope / curvature )
      x = y if theta == 1.0 else x + theta * d
      h = h + theta * Qd
      if ( curvature > 0.0 ):
        step = min( STEP_MAX, max( STEP_MIN, float( d @ d ) / curvature ) )
      if ( k % GRADIENT_REFRESH == 0 ):
        h = self.gradient( x )
      if ( k % RESIDUAL_EVERY == 0 ):
        h = self.gradient( x )
        residual = self.residual( x, h )
        trace.append( ( k, float( x @ ( h + self.b ) ), residual ) )
        if ( residual <= limit ):
          break
    return x, trace, done

  # Primal active-set method.  The working set holds the variables sitting
  # exactly on a bound; the rest solve the equality-constrained problem.
  def polish( self, x, limit, max_iterations, trace, offset ):
    candidate = self.project( x - self.gradient( x ) / self.scale )
    if ( self.objective( candidate ) <= self.objective( x ) ):
      x = candidate
    x = x.copy()
    at_lower = x <= self.lower
    at_upper = x >= self.upper
    x[at_lower] = self.lower[at_lower]
    x[at_upper] = self.upper[at_upper]

    for step in range( 1, max_iterations + 1 ):
      bound = at_lower | at_upper
      free = np.flatnonzero( ~bound )
      target, multipliers = self.equality_step( x, free )
      p = target - x[free]

      ratios = np.full( len( free ), np.inf )
      down = p < 0.0
      up = p > 0.0
      ratios[down] = ( self.lower[free][down] - x[free][down] ) / p[down]
      ratios[up] = ( self.upper[free][up] - x[free][up] ) / p[up]
      blocking = int( np.argmin( ratios ) ) if len( free ) else -1

      if ( blocking >= 0 and ratios[blocking] < 1.0 ):
        alpha = max( 0.0, float( ratios[blocking] ) )
        x[free] = x[free] + alpha * p
        node = free[blocking]
        if ( p[blocking] < 0.0 ):
          x[node] = self.lower[node]
          at_lower[node] = True
        else:
          x[node] = self.upper[node]
          at_upper[node] = True
      else:
        x[free] = target
        release = self.most_violated( x, at_lower, at_upper, multipliers, limit )
        if ( release < 0 ):
          trace.append( ( offset + step, self.objective( x ), self.residual( x ) ) )
          return x, step
        at_lower[release] = False
        at_upper[release] = False
      if ( step % RESIDUAL_EVERY == 0 ):
        trace.append( ( offset + step, self.objective( x ), self.residual( x ) ) )
    logger.warning( "qp %s: active-set polish stopped after %d iterations", self.label, max_iterations )
    return x, max_iterations

  # solve Q_FF z + Q_FB x_B + b_F = E^T mu, E z = remaining targets
  def equality_step( self, x, free ):
    multipliers = {}
    if ( len( free ) == 0 ):
      return np.zeros( 0 ), multipliers
    Q = self.Q
    fixed = np.ones( len( x ), dtype = bool )
    fixed[free] = False
    rhs = -( self.b[free] + Q[np.ix_( free, np.flatnonzero( fixed ) )] @ x[fixed] )
    try:
      factor = cho_factor( Q[np.ix_( free, free )] )
    except LinAlgError:
      raise NotPositiveDefinite( "free block of the QP matrix is not positive definite", problem = self.label )
    z = cho_solve( factor, rhs )

    active = []
    for k, g in enumerate( self.groups ):
      members = np.flatnonzero( self.grouped[free] == k )
      if ( len( members ) ):
        fixed_sum = float( x[g].sum() - x[free[members]].sum() )
        active.append( ( k, members, self.targets[k] - fixed_sum ) )
    if ( not active ):
      return z, multipliers
    E = np.zeros( ( len( active ), len( free ) ) )
    c = np.zeros( len( active ) )
    for row, ( k, members, remaining ) in enumerate( active ):
      E[row, members] = 1.0
      c[row] = remaining
    solved = cho_solve( factor, E.T )
    mu = np.linalg.solve( E @ solved, c - E @ z )
    z = z + solved @ mu
    for row, ( k, members, remaining ) in enumerate( active ):
      multipliers[k] = float( mu[row] )
    return z, multipliers

  # bound variable whose multiplier has the wrong sign by the most; -1 if none
  def most_violated( self, x, at_lower, at_upper, multipliers, limit ):
    h = self.gradient( x )
    shifts = np.zeros( len( x ) )
    for k, g in enumerate( self.groups ):
      if ( k in multipliers ):
        shifts[g] = multipliers[k]
        continue
      lows = g[at_lower[g]]
      highs = g[at_upper[g]]
      # no free member: any shift in [max h over upper, min h over lower] works
      ceiling = float( np.min( h[lows] ) ) if len( lows ) else np.inf
      floor = float( np.max( h[highs] ) ) if len( highs ) else -np.inf
      if ( ceiling >= floor ):
        shifts[g] = ceiling if np.isfinite( ceiling ) else floor
      else:
        shifts[g] = 0.5 * ( ceiling + floor )
    reduced = h - shifts
    amounts = np.where( at_lower, -reduced, reduced )
    amounts[~( at_lower ^ at_upper )] = -np.inf
    worst = int( np.argmax( amounts ) )
    return worst if amounts[worst] > limit else -1


# per-group projection.  The shift is bracketed, found by brentq, and then
# recomputed exactly from the variables the shift leaves strictly inside.
def project_group( y, lower, upper, target ):
  if ( len( y ) == 0 ):
    return y.copy()

  def excess( tau ):
    return float( np.clip( y - tau, lower, upper ).sum() ) - target

  high = float( np.max( y - lower ) )
  if ( np.all( np.isfinite( upper ) ) ):
    low = float( np.min( y - upper ) )
  else:
    low = float( np.min( y - lower ) ) - ( target - float( lower.sum() ) ) - 1.0
    finite = np.isfinite( upper )
    if ( np.any( finite ) ):
      low = min( low, float( np.min( y[finite] - upper[finite] ) ) )
  if ( excess( high ) >= 0.0 ):
    tau = high
  elif ( excess( low ) <= 0.0 ):
    tau = low
  else:
    tau = brentq( excess, low, high, xtol = 1e-15, rtol = 1e-15, maxiter = 500 )

  shifted = y - tau
  on_lower = shifted <= lower
  on_upper = shifted >= upper
  inside = ~( on_lower | on_upper )
  if ( np.any( inside ) ):
    fixed = float( lower[on_lower].sum() + upper[on_upper].sum() )
    tau = ( float( y[inside].sum() ) - ( target - fixed ) ) / float( np.count_nonzero( inside ) )
  return np.clip( y - tau, lower, upper )


# ----------------------------------------------------

class CNQPTest( TestCase ):

  def test_simplex_projection( self ):
    qp = CNQuadraticProgram( np.eye( 4 ), np.zeros( 4 ), groups = [ range( 4 ) ], targets = [ 1.0 ] )
    x = qp.project( np.array( [ 0.8, 0.6, 0.1, -0.5 ] ) )
    self.assertTrue( np.allclose( x, [ 0.6, 0.4, 0.0, 0.0 ], atol = 1e-14 ) )
    self.assertAlmostEqual( x.sum(), 1.0, places = 14 )

  def test_capped_projection( self ):
    qp = CNQuadraticProgram( np.eye( 4 ), np.zeros( 4 ), upper = 0.5, groups = [ range( 4 ) ], targets = [ 1.0 ] )
    x = qp.project( np.array( [ 0.8, 0.6, 0.1, -0.5 ] ) )
    self.assertTrue( np.allclose( x, [ 0.5, 0.5, 0.0, 0.0 ], atol = 1e-14 ) )

  def test_nearest_point_problem( self ):
    c = np.array( [ 0.8, 0.6, 0.1, -0.5 ] )
    qp = CNQuadraticProgram( np.eye( 4 ), -c, groups = [ range( 4 ) ], targets = [ 1.0 ] )
    result = qp.solve()
    self.assertTrue( result.converged )
    self.assertTrue( np.allclose( result.x, [ 0.6, 0.4, 0.0, 0.0 ], atol = 1e-9 ) )

  def test_infeasible_caps( self ):
    with self.assertRaises( Infeasible ):
      CNQuadraticProgram( np.eye( 4 ), np.zeros( 4 ), upper = 0.2, groups = [ range( 4 ) ], targets = [ 1.0 ] )

  def test_kkt_conditions( self ):
    rng = np.random.default_rng( 11 )
    A = rng.normal( size = ( 30, 30 ) )
    Q = A.T @ A / 30.0 + 0.1 * np.eye( 30 )
    b = rng.normal( size = 30 )
    qp = CNQuadraticProgram( Q, b, upper = 0.1, groups = [ range( 30 ) ], targets = [ 1.0 ] )
    result = qp.solve( tolerance = 1e-10 )
    x = result.x
    h = Q @ x + b
    self.assertAlmostEqual( x.sum(), 1.0, places = 12 )
    self.assertTrue( np.all( x >= 0.0 ) and np.all( x <= 0.1 ) )
    inside = ( x > 1e-9 ) & ( x < 0.1 - 1e-9 )
    self.assertTrue( np.any( inside ) )
    level = np.median( h[inside] )
    self.assertLess( np.max( np.abs( h[inside] - level ) ), 1e-7 )
    self.assertTrue( np.all( h[x <= 1e-9] >= level - 1e-7 ) )
    self.assertTrue( np.all( h[x >= 0.1 - 1e-9] <= level + 1e-7 ) )

  def test_two_groups_and_monotone_trace( self ):
    rng = np.random.default_rng( 3 )
    A = rng.normal( size = ( 20, 20 ) )
    Q = A.T @ A / 20.0 + 0.5 * np.eye( 20 )
    b = rng.normal( size = 20 )
    qp = CNQuadraticProgram( Q, b, groups = [ range( 10 ), range( 10, 20 ) ], targets = [ 1.0, 2.0 ] )
    result = qp.solve()
    self.assertAlmostEqual( result.x[:10].sum(), 1.0, places = 12 )
    self.assertAlmostEqual( result.x[10:].sum(), 2.0, places = 12 )
    objectives = [ row[1] for row in result.trace ]
    for earlier, later in zip( objectives, objectives[1:] ):
      self.assertLessEqual( later, earlier + 1e-12 * abs( earlier ) + 1e-14 )

  def test_single_variable( self ):
    qp = CNQuadraticProgram( [ [ 2.0 ] ], [ 5.0 ], groups = [ [ 0 ] ], targets = [ 1.0 ] )
    result = qp.solve()
    self.assertEqual( result.x[0], 1.0 )
    self.assertAlmostEqual( result.objective, 12.0 )

  def test_polish_only( self ):
    rng = np.random.default_rng( 8 )
    A = rng.normal( size = ( 15, 15 ) )
    Q = A.T @ A + np.eye( 15 )
    b = rng.normal( size = 15 )
    qp = CNQuadraticProgram( Q, b, groups = [ range( 15 ) ], targets = [ 1.0 ] )
    quick = qp.solve( pg_iterations = 0, tolerance = 1e-11 )
    slow = qp.solve( tolerance = 1e-11 )
    self.assertTrue( np.allclose( quick.x, slow.x, atol = 1e-8 ) )
