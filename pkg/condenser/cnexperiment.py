# This file builds complete condenser problems (the ball and the
# half-space examples, or whatever a run config describes) and runs the
# canned experiments on them:
#
#   short circuit         1 / c_g over a growing stack of discs, which must
#                         keep falling toward 0
#   unbounded constraint  optima for constraints xi_1 + ... + xi_m whose
#                         pieces escape to infinity with vanishing energy
#   counterexample        a measure of bounded Green energy whose Newtonian
#                         energy grows without bound
#   duality               the dual probability measure of a constrained
#                         Green minimizer
#
# plus disc/ball capacities and the calibration of the diagonal rule.

import csv
import logging
import math
import os
import tempfile

import numpy as np
from scipy.optimize import brentq

from django.test import TestCase

from condenser import cnconf
from condenser.cnbalayage import balayage, equilibrium_measure, green_energy_via_identity
from condenser.cnerrors import ConfigError, InfeasibleSpec, NotPositiveDefinite, UnsupportedDomain
from condenser.cngeometry import (A1, CNDisc, CNDomain, CNPlateSpec, CNPointCloud, discretize,
  discretize_condenser, kelvin_transform, shell_count)
from condenser.cnkernel import CNKernelKind, CNKernelMatrix, assemble
from condenser.cnmeasure import CNConstraint, CNExternalField, CNMeasure, norm
from condenser.cnsolver import CNProblem, solve_green_constrained
from condenser.cnverify import duality_check

logger = logging.getLogger( __name__ )

# bounds the experiments are judged by
IDENTITY_AGREEMENT = 0.03
UNBOUNDED_FINAL_RATIO = 0.1
GREEN_PARTIAL_BOUND = 1.1
RIESZ_GROWTH = 0.5

# radius of the k-th escaping disc over j^4 E(unit disc), so that each
# piece of the unbounded constraint has energy strictly below j^-4
ESCAPE_MARGIN = 1.1

# starting bracket for the diagonal factor, and how many halvings or
# decades calibrate_beta may spend widening it
CALIBRATION_LOW = 1e-3
CALIBRATION_HIGH = 1.0
CALIBRATION_STEPS = 60

# the half-space counterexample is inverted in S( (-2, 0, 0), 2 ), which
# maps {x1 > 0} onto B( (-1, 0, 0), 1 )
KELVIN_CENTRE_OFFSET = -2.0
KELVIN_RADIUS = 2.0


# ----------------------------------------------------
# constraints

# xi = q * (Riesz equilibrium measure of A1)
def scaled_equilibrium_constraint( cloud, riesz, q ):
  if ( not q > 1.0 ):
    raise InfeasibleSpec( "the scale q of the equilibrium constraint must exceed 1", q = q )
  equilibrium, capacity = equilibrium_measure( cloud.a1, riesz, cloud )
  xi = equilibrium.scaled( q, 'xi' )
  xi.meta['capacity'] = capacity
  return xi

# xi = sum over the discs K_k of lambda_k / k^2, lambda_k the Riesz
# equilibrium measure of K_k
def disc_series_constraint( cloud, riesz ):
  parts = sorted( set( int( p ) for p in cloud.part[cloud.a1] ) )
  if ( len( parts ) < 2 or parts[0] < 0 ):
    raise InfeasibleSpec( "the disc-series constraint needs at least two discs in A1", discs = len( parts ) )
  weights = np.zeros( len( cloud ) )
  for k in parts:
    nodes = cloud.part_indices( k )
    nodes = nodes[cloud.plate_tag[nodes] == A1]
    lam, _ = equilibrium_measure( nodes, riesz, cloud )
    weights += lam.weights / float( k + 1 ) ** 2
  return CNMeasure( cloud, weights, 'xi' )

# per-node values from a CSV with columns 'index' and 'column'
def read_node_values( path, cloud, column, field ):
  values = np.zeros( len( cloud ) )
  line = 1
  try:
    with open( path, newline = '' ) as source:
      for line, row in enumerate( csv.DictReader( source ), 2 ):
        index = int( row['index'] )
        if ( not 0 <= index < len( cloud ) ):
          raise ConfigError( "node index {} is outside the cloud".format( index ), field = field, line = line )
        values[index] = float( row[column] )
  except OSError as error:
    raise ConfigError( "cannot read {}: {}".format( path, error ), field = field )
  except ( KeyError, TypeError, ValueError ):
    raise ConfigError( "{} needs the columns 'index' and '{}'".format( path, column ), field = field, line = line )
  return values


# ----------------------------------------------------
# problem builders

# The ball example: D = A1 = B(0, r), A2 the complement, f = 0 and
# xi = q * lambda_r with q > 1.
def ball_example( alpha = 1.5, radius = 1.0, q = 2.0, a1_nodes = 200, a2_nodes = 500, dimension = 3,
                  margin = 0.0, seed = 0, beta = None, threads = None, truncation_factor = None ):
  domain = CNDomain.ball( np.zeros( dimension ), radius, alpha )
  cloud = discretize_condenser( domain, CNPlateSpec.ball_interior( a1_nodes, margin ),
    CNPlateSpec.complement_shell( a2_nodes, truncation_factor = truncation_factor ), seed )
  riesz = assemble( CNKernelKind.riesz( alpha, dimension ), cloud, beta = beta, threads = threads )
  xi = scaled_equilibrium_constraint( cloud, riesz, q )
  return CNProblem.create( domain, cloud, xi, riesz = riesz, beta = beta, threads = threads, name = 'ball_q2' )

# The half-space example: alpha = 2, A1 the discs K_k = {x1 = 1/k,
# x2^2 + x3^2 <= k^2}, f = 0 and xi = sum lambda_k / k^2.
def disc_series_example( levels = 3, nodes_per_disc = 60, a2_nodes = 600, seed = 0, beta = None, threads = None,
                         outer_radius = None, truncation_factor = None ):
  domain = CNDomain.halfspace( 3, 2.0 )
  cloud = discretize_condenser( domain, CNPlateSpec.disc_series( levels, nodes_per_disc ),
    CNPlateSpec.complement_shell( a2_nodes, truncation_factor = truncation_factor, outer_radius = outer_radius ),
    seed )
  riesz = assemble( CNKernelKind.riesz( 2.0, 3 ), cloud, beta = beta, threads = threads )
  xi = disc_series_constraint( cloud, riesz )
  return CNProblem.create( domain, cloud, xi, riesz = riesz, beta = beta, threads = threads, name = 'disc_series' )

def a1_plate_spec( block ):
  shape = block['shape']
  margin = block.get( 'margin' ) or 0.0
  if ( shape == 'ball_interior' ):
    return CNPlateSpec.ball_interior( block['nodes'], margin )
  if ( shape == 'disc_series' ):
    levels = block['levels']
    return CNPlateSpec.disc_series( levels, max( 1, block['nodes'] // levels ), margin )
  discs = [ CNDisc( d['offset'], d['radius'], d.get( 'center' ) ) for d in block['discs'] ]
  return CNPlateSpec.disc_stack( discs, block['nodes'], margin )

def a2_plate_spec( block ):
  if ( block is None or block['shape'] == 'none' ):
    return None
  if ( block['shape'] == 'annulus' ):
    return CNPlateSpec.annulus( block.get( 'inner_radius' ) or 0.0, block.get( 'outer_radius' ), block['nodes'] )
  return CNPlateSpec.complement_shell( block['nodes'],
    truncation_factor = block.get( 'truncation_factor' ),
    outer_radius = block.get( 'outer_radius' ),
    boundary_fraction = block.get( 'boundary_fraction' ),
    growth = block.get( 'growth' ) )

# Everything a run config describes, assembled into one problem.
def build_problem( config ):
  d = config.domain
  domain = CNDomain( d['kind'], d['dimension'], d['alpha'], d.get( 'center' ), d.get( 'radius' ) )
  cloud = discretize_condenser( domain, a1_plate_spec( config.plates['a1'] ),
    a2_plate_spec( config.plates.get( 'a2' ) ), config.seed )
  solver = config.solver
  beta, threads = solver.get( 'beta' ), config.threads
  riesz = assemble( CNKernelKind.riesz( domain.alpha, domain.dimension ), cloud, beta = beta, threads = threads )

  constraint = config.constraint
  if ( constraint['shape'] == 'scaled_equilibrium' ):
    xi = scaled_equilibrium_constraint( cloud, riesz, constraint['q'] )
  elif ( constraint['shape'] == 'disc_series' ):
    xi = disc_series_constraint( cloud, riesz )
  else:
    xi = CNMeasure( cloud, read_node_values( config.resolve( constraint['path'] ), cloud, 'weight',
      'constraint.path' ), 'xi' )

  has_a2 = len( cloud.a2 ) > 0
  field = None
  block = config.field
  if ( block['case'] == CNExternalField.CASE_I ):
    field = CNExternalField.case_one( cloud, read_node_values( config.resolve( block['path'] ), cloud,
      'value', 'field.path' ) )
  elif ( block['case'] == CNExternalField.CASE_II ):
    field = CNExternalField.case_two( cloud, domain, block['sources'], block['weights'],
      riesz if has_a2 else None )

  return CNProblem.create( domain, cloud, CNConstraint( xi, riesz ), field,
    riesz = riesz if has_a2 else None, beta = beta, threads = threads,
    green_method = solver.get( 'green_method' ), name = config.name )


# ----------------------------------------------------
# Unit discs reused at many sizes.  The Riesz kernel is homogeneous and
# the diagonal rule scales with the cell radius, so a template scaled by r
# has exactly 1/r times the template's energy.

def disc_template( domain, nodes, seed = 0, beta = None, threads = None ):
  template = discretize( domain, CNPlateSpec.disc_stack( [ CNDisc( 1.0, 1.0 ) ], nodes ), seed )
  riesz = assemble( CNKernelKind.riesz( domain.alpha, domain.dimension ), template, beta = beta, threads = threads )
  unit, capacity = equilibrium_measure( template.a1, riesz )
  return template, unit.weights, 1.0 / capacity

# copies of the template disc, one per (offset, lateral centre, radius)
def place_discs( template, placements ):
  points, radii, measures, parts = [], [], [], []
  for k, ( offset, centre, radius ) in enumerate( placements ):
    block = np.array( template.points, copy = True )
    block[:, 0] = offset
    block[:, 1:] = np.asarray( centre, dtype = float ) + radius * template.points[:, 1:]
    points.append( block )
    radii.append( radius * template.cell_radius )
    measures.append( radius ** 2 * template.cell_measure )
    parts.append( np.full( len( template ), k ) )
  size = sum( len( p ) for p in points )
  return CNPointCloud( np.vstack( points ), np.concatenate( radii ), np.full( size, A1 ), seed = template.seed,
    cell_measure = np.concatenate( measures ), part = np.concatenate( parts ) )

# the template weights repeated over every placed disc, scaled per disc
def stacked_weights( weights, scales ):
  return np.concatenate( [ scale * weights for scale in scales ] )

def masked( cloud, weights, parts ):
  keep = np.isin( cloud.part, parts )
  return np.where( keep, weights, 0.0 )

def quadratic( weights, K ):
  return float( weights @ K.values @ weights )


# ----------------------------------------------------
# Short circuit.  For the exhaustion K_1 u ... u K_j of the disc series,
# 1 / c_g equals ||lambda_j||_g^2 = ||lambda_j - lambda_j'||_alpha^2 and
# must decrease toward 0 as j grows.

# The disc exhaustion K_1 u ... u K_j of the half-space.  Disc k sits at
# height 1/k, and its sweep onto the boundary plane varies on that scale, so
# the plane is sampled with spacing plane_resolution / levels over the
# footprint of the stack (and graded past it), and disc k gets enough nodes
# for a spacing of resolution / k.  For alpha = 2 all of A2 is on the plane.
def short_circuit_experiment( levels = 6, nodes_per_disc = 12, a2_nodes = None, domain = None, seed = 0,
                              beta = None, threads = None, outer_radius = None, resolution = 2.0,
                              plane_resolution = 1.0, growth = None, truncation_factor = None ):
  domain = CNDomain.halfspace( 3, 2.0 ) if domain is None else domain
  if ( not domain.is_halfspace() ):
    raise UnsupportedDomain( "the disc exhaustion lives in the half-space" )
  if ( levels < 2 ):
    raise InfeasibleSpec( "a trend needs at least two levels", levels = levels )
  if ( not plane_resolution > 0.0 ):
    raise InfeasibleSpec( "the plane resolution must be positive", plane_resolution = plane_resolution )
  growth = cnconf.setting( 'SPACING_GROWTH', growth )
  a1_cloud = discretize( domain, CNPlateSpec.disc_series( levels, nodes_per_disc, resolution = resolution ), seed )
  if ( outer_radius is None ):
    outer_radius = cnconf.setting( 'TRUNCATION_FACTOR', truncation_factor ) * a1_cloud.extent()
  on_plane = domain.alpha == 2.0
  spacing = plane_resolution / levels
  if ( a2_nodes is None ):
    a2_nodes = shell_count( domain.dimension - 1, 0.0, outer_radius, spacing, flat = levels + 1.0, growth = growth )
    if ( not on_plane ):
      a2_nodes *= 2
  a2_spec = CNPlateSpec.complement_shell( a2_nodes, outer_radius = outer_radius,
    boundary_fraction = 1.0 if on_plane else None, growth = growth )
  cloud = CNPointCloud.union( a1_cloud, discretize( domain, a2_spec, seed, reference = a1_cloud ) )
  logger.info( "short circuit over %d levels: %d A1 nodes, %d A2 nodes out to radius %.4g",
    levels, len( cloud.a1 ), len( cloud.a2 ), outer_radius )
  riesz = assemble( CNKernelKind.riesz( domain.alpha, domain.dimension ), cloud, beta = beta, threads = threads )
  kind = CNKernelKind.green( domain )
  if ( kind.has_closed_form() ):
    green = assemble( kind, cloud, beta = beta, threads = threads )
  else:
    from condenser.cnbalayage import assemble_green_by_balayage
    green = assemble_green_by_balayage( kind, cloud, beta = beta, threads = threads, riesz = riesz )

  a1 = cloud.a1
  values, identities, gaps, capacities = [], [], [], []
  for j in range( 1, levels + 1 ):
    nodes = a1[cloud.part[a1] < j]
    lam, capacity = equilibrium_measure( nodes, green, cloud )
    identity = green_energy_via_identity( lam, riesz, balayage( lam, riesz ) )
    value = 1.0 / capacity
    capacities.append( capacity )
    values.append( value )
    identities.append( identity )
    gaps.append( abs( identity - value ) / value )
    logger.info( "level %d: 1/c_g = %.6g, ||lambda - lambda'||^2 = %.6g", j, value, identity )

  decreasing = all( b < a for a, b in zip( values, values[1:] ) )
  slope = np.polyfit( np.log( np.arange( 1, levels + 1 ) ), np.log( values ), 1 )[0]
  report = {
    'levels': list( range( 1, levels + 1 ) ),
    'inverse_capacity': values,
    'green_capacity': capacities,
    'identity': identities,
    'identity_gap': gaps,
    'ratios': [ b / a for a, b in zip( values, values[1:] ) ],
    'decay_exponent': float( -slope ),
    'decreasing': decreasing,
    'identity_ok': max( gaps ) <= IDENTITY_AGREEMENT,
    'truncation_radius': cloud.truncation_radius,
    'a1_nodes': int( len( cloud.a1 ) ),
    'a2_nodes': int( len( cloud.a2 ) ),
    'plane_spacing': spacing,
  }
  report['passed'] = bool( decreasing and report['decay_exponent'] > 0.0 and report['identity_ok'] )
  return report


# ----------------------------------------------------
# Unbounded constraint.  Disc j sits at x1 = rho_j with radius rho_j,
# rho_j = 1.1 j^4 E(unit disc), so its equilibrium measure xi_j has
# ||xi_j||^2 < j^-4.  The field is the Green potential of a point source.
# The constraints xi_1 + ... + xi_m grow and the optima go to 0.

def unbounded_constraint_experiment( levels = 5, nodes_per_disc = 30, domain = None, source = None,
                                     source_mass = 1.0, seed = 0, beta = None, threads = None, tolerance = None ):
  domain = CNDomain.halfspace( 3, 2.0 ) if domain is None else domain
  if ( not domain.is_halfspace() or domain.alpha != 2.0 ):
    raise UnsupportedDomain( "the escaping discs need the half-space with alpha = 2" )
  if ( levels < 2 ):
    raise InfeasibleSpec( "a constraint of mass above 1 needs at least two discs", levels = levels )
  n = domain.dimension
  source = np.eye( n )[0] if source is None else np.asarray( source, dtype = float )

  template, unit, unit_energy = disc_template( domain, nodes_per_disc, seed, beta, threads )
  radii = [ ESCAPE_MARGIN * unit_energy * j ** 4 for j in range( 1, levels + 1 ) ]
  placements = [ ( rho, np.eye( n - 1 )[0] * 4.0 * rho, rho ) for rho in radii ]
  cloud = place_discs( template, placements )
  riesz = assemble( CNKernelKind.riesz( 2.0, n ), cloud, beta = beta, threads = threads )
  green = assemble( CNKernelKind.green( domain ), cloud, beta = beta, threads = threads )
  field = CNExternalField.case_two( cloud, domain, [ source ], [ source_mass ] )

  pieces = []
  for j in range( levels ):
    piece = np.zeros( len( cloud ) )
    piece[cloud.part == j] = unit
    pieces.append( piece )
  norms = [ math.sqrt( quadratic( piece, riesz ) ) for piece in pieces ]

  optima, piece_values = [], []
  for m in range( 2, levels + 1 ):
    xi = CNMeasure( cloud, np.sum( pieces[:m], axis = 0 ), 'xi' )
    problem = CNProblem( domain, cloud, CNConstraint( xi ), field, green = green,
      name = 'unbounded-{}'.format( m ) )
    minimizer = solve_green_constrained( problem, tolerance = tolerance )
    optima.append( minimizer.meta['objective'] )
    last = pieces[m - 1]
    piece_values.append( quadratic( last, green ) + 2.0 * float( field.values @ last ) )
    logger.info( "constraint xi_1 + ... + xi_%d: optimum %.6g", m, optima[-1] )

  report = {
    'levels': list( range( 2, levels + 1 ) ),
    'optima': optima,
    'piece_values': piece_values,
    'radii': radii,
    'component_norms': norms,
    'component_bounds': [ j ** -2.0 for j in range( 1, levels + 1 ) ],
    'decreasing': all( b < a for a, b in zip( optima, optima[1:] ) ),
    'final_ratio': optima[-1] / optima[0],
  }
  report['norms_within_bound'] = all( v <= b for v, b in zip( norms, report['component_bounds'] ) )
  report['passed'] = bool( report['decreasing'] and report['final_ratio'] <= UNBOUNDED_FINAL_RATIO
    and report['norms_within_bound'] )
  return report


# ----------------------------------------------------
# The Green-finite, Newton-infinite measure.  c_k = 2^-k, r_k = 4^-k, so
# sum c_k = 1 while sum c_k^2 / r_k diverges.  Disc k has radius r_k and
# lateral centre (k, 0), at the height eps_k where its Green norm equals
# 'target'.

def counterexample_offset( template, weights, domain, radius, target, beta = None ):
  n = domain.dimension
  kind = CNKernelKind.green( domain )

  def excess( offset ):
    cloud = place_discs( template, [ ( offset, np.zeros( n - 1 ), radius ) ] )
    return norm( CNMeasure( cloud, weights ), assemble( kind, cloud, beta = beta ) ) - target

  low = 1e-9 * radius
  high = radius
  for _ in range( 80 ):
    if ( excess( high ) > 0.0 ):
      break
    low, high = high, 2.0 * high
  else:
    raise InfeasibleSpec( "the Green norm never reaches the target", target = target, radius = radius )
  return brentq( excess, low, high, xtol = 1e-14 * radius, rtol = 1e-12, maxiter = 200 )

def counterexample_experiment( terms = 8, nodes_per_disc = 40, target = 0.5, variant = 'halfspace', seed = 0,
                               beta = None, threads = None ):
  if ( terms < 1 ):
    raise InfeasibleSpec( "the counterexample needs at least one term", terms = terms )
  if ( not 0.0 < target ):
    raise InfeasibleSpec( "the per-disc Green norm must be positive", target = target )
  if ( variant not in ( 'halfspace', 'ball' ) ):
    raise InfeasibleSpec( "unknown counterexample variant '{}'".format( variant ) )
  domain = CNDomain.halfspace( 3, 2.0 )
  template, unit, unit_energy = disc_template( domain, nodes_per_disc, seed, beta, threads )

  ks = list( range( 1, terms + 1 ) )
  c = [ 2.0 ** -k for k in ks ]
  r = [ 4.0 ** -k for k in ks ]
  eps = [ counterexample_offset( template, unit, domain, rk, target, beta ) for rk in r ]
  cloud = place_discs( template, [ ( e, np.array( [ float( k ), 0.0 ] ), rk ) for e, k, rk in zip( eps, ks, r ) ] )
  weights = stacked_weights( unit, c )
  green = assemble( CNKernelKind.green( domain ), cloud, beta = beta, threads = threads )
  riesz = assemble( CNKernelKind.riesz( 2.0, 3 ), cloud, beta = beta, threads = threads )

  green_sums, riesz_sums = [], []
  for m in ks:
    partial = masked( cloud, weights, range( m ) )
    green_sums.append( math.sqrt( max( quadratic( partial, green ), 0.0 ) ) )
    riesz_sums.append( quadratic( partial, riesz ) )
  increments = [ b - a for a, b in zip( [ 0.0 ] + riesz_sums, riesz_sums ) ]

  report = {
    'terms': ks,
    'c': c,
    'r': r,
    'c2_over_r': [ ck ** 2 / rk for ck, rk in zip( c, r ) ],
    'epsilon': eps,
    'epsilon_below_one': all( e < 1.0 for e in eps ),
    'target': target,
    'unit_disc_energy': unit_energy,
    'green_partial_sums': green_sums,
    'riesz_partial_sums': riesz_sums,
    'riesz_increments': increments,
    'riesz_per_term_min': min( s / m for s, m in zip( riesz_sums, ks ) ),
    'green_bounded': max( green_sums ) <= GREEN_PARTIAL_BOUND,
    'riesz_growth': all( step >= RIESZ_GROWTH * unit_energy for step in increments ),
  }

  if ( variant == 'ball' ):
    centre = np.array( [ KELVIN_CENTRE_OFFSET, 0.0, 0.0 ] )
    image, image_weights = kelvin_transform( cloud, weights, centre, KELVIN_RADIUS, 2.0 )
    ball = CNDomain.ball( 0.5 * centre, 0.5 * KELVIN_RADIUS, 2.0 )
    if ( not np.all( ball.contains( image.points ) ) ):
      raise InfeasibleSpec( "the Kelvin image left the ball" )
    ball_green = assemble( CNKernelKind.green( ball ), image, beta = beta, threads = threads )
    ball_riesz = assemble( CNKernelKind.riesz( 2.0, 3 ), image, beta = beta, threads = threads )
    report['ball'] = ball.describe()
    report['ball_green_partial_sums'] = [
      math.sqrt( max( quadratic( masked( image, image_weights, range( m ) ), ball_green ), 0.0 ) ) for m in ks ]
    report['ball_riesz_partial_sums'] = [
      quadratic( masked( image, image_weights, range( m ) ), ball_riesz ) for m in ks ]
    report['green_bounded'] = report['green_bounded'] and max( report['ball_green_partial_sums'] ) <= GREEN_PARTIAL_BOUND

  report['passed'] = bool( report['green_bounded'] and report['riesz_growth'] )
  return report


# ----------------------------------------------------
# duality on a solved (or to be solved) problem

def duality_experiment( problem, tolerance = None, threshold = None ):
  minimizer = solve_green_constrained( problem, tolerance = tolerance )
  report = duality_check( problem, minimizer, threshold = threshold, tolerance = tolerance )
  report['green_objective'] = minimizer.meta['objective']
  return report


# ----------------------------------------------------
# capacities

# Two values are quoted for the Newtonian capacity of a disc of radius r:
# 2r/pi, the continuum value for the kernel 1/|x - y|, and 2r/pi^2, which
# belongs to a kernel normalized by an extra factor of pi.
DISC_REFERENCES = {
  'continuum': ( 'continuum_2r_over_pi', 1.0 / math.pi ),
  'quoted': ( 'quoted_2r_over_pi2', 1.0 / math.pi ** 2 ),
}

def disc_reference_name( reference ):
  reference = 'continuum' if reference is None else reference
  if ( reference not in DISC_REFERENCES ):
    raise InfeasibleSpec( "unknown disc capacity reference '{}'".format( reference ),
      choices = ", ".join( sorted( DISC_REFERENCES ) ) )
  return reference

def disc_reference( radius, reference = None ):
  return 2.0 * radius * DISC_REFERENCES[disc_reference_name( reference )][1]

def capacity_experiment( shape = 'disc', radius = 1.0, nodes = 2000, kernel = 'riesz', alpha = 2.0, dimension = 3,
                         levels = 3, offset = None, a2_nodes = 600, seed = 0, beta = None, threads = None,
                         reference = None ):
  if ( shape == 'disc' ):
    domain = CNDomain.halfspace( dimension, alpha )
    a1_spec = CNPlateSpec.disc_stack( [ CNDisc( radius if offset is None else offset, radius ) ], nodes )
  elif ( shape == 'ball' ):
    domain = CNDomain.ball( np.zeros( dimension ), radius, alpha )
    a1_spec = CNPlateSpec.ball_interior( nodes )
  elif ( shape == 'disc-stack' ):
    domain = CNDomain.halfspace( dimension, alpha )
    a1_spec = CNPlateSpec.disc_series( levels, max( 1, nodes // levels ) )
  else:
    raise InfeasibleSpec( "unknown capacity shape '{}'".format( shape ) )
  if ( kernel not in ( 'riesz', 'green' ) ):
    raise InfeasibleSpec( "unknown kernel '{}'".format( kernel ) )

  green_kind = CNKernelKind.green( domain )
  shell = None
  if ( kernel == 'green' and not green_kind.has_closed_form() ):
    shell = CNPlateSpec.complement_shell( a2_nodes )
  cloud = discretize_condenser( domain, a1_spec, shell, seed )
  kind = CNKernelKind.riesz( alpha, dimension ) if kernel == 'riesz' else green_kind
  K = assemble( kind, cloud, beta = beta, threads = threads )
  measure, capacity = equilibrium_measure( cloud.a1, K, cloud )

  report = {
    'shape': shape,
    'kernel': str( kind ),
    'radius': radius,
    'nodes': int( len( cloud.a1 ) ),
    'beta': cnconf.setting( 'BETA', beta ),
    'capacity': capacity,
    'energy': 1.0 / capacity,
    'exact_projection': measure.meta['exact_projection'],
  }
  if ( kernel == 'riesz' and alpha == 2.0 and dimension == 3 and shape == 'disc' ):
    reference = disc_reference_name( reference )
    report['reference'] = { name: disc_reference( radius, which ) for which, ( name, _ ) in DISC_REFERENCES.items() }
    report['relative_errors'] = { name: abs( capacity / value - 1.0 ) for name, value in report['reference'].items() }
    report['compared_with'] = DISC_REFERENCES[reference][0]
    report['relative_error'] = report['relative_errors'][report['compared_with']]
  elif ( kernel == 'riesz' and alpha == 2.0 and shape == 'ball' ):
    report['reference'] = { 'continuum_r_pow_n_minus_2': radius ** ( dimension - 2 ) }
    report['relative_error'] = abs( capacity / report['reference']['continuum_r_pow_n_minus_2'] - 1.0 )
  return report, measure

# The beta for which the discrete Newtonian capacity of a disc of radius
# 'radius' hits 'target' (the 'reference' value, 2r/pi unless told
# otherwise, when no target is given).  Only the diagonal
# depends on beta, so the off-diagonal part is assembled once.
#
# The capacity grows with beta until the matrix stops being positive
# definite.  A smaller beta only raises the diagonal, so a beta that
# loses definiteness stands for "capacity too large" and the bracket is
# halved from above; it is widened downward until the capacity falls
# below the target.
def calibrate_beta( target = None, radius = 1.0, nodes = 2000, seed = 0, low = None, high = None, threads = None,
                    reference = None ):
  target = disc_reference( radius, reference ) if target is None else float( target )
  low = CALIBRATION_LOW if low is None else float( low )
  high = CALIBRATION_HIGH if high is None else float( high )
  if ( not target > 0.0 ):
    raise InfeasibleSpec( "the target capacity must be positive", target = target )
  if ( not 0.0 < low < high ):
    raise InfeasibleSpec( "the beta bracket needs 0 < low < high", low = low, high = high )
  domain = CNDomain.halfspace( 3, 2.0 )
  cloud = discretize( domain, CNPlateSpec.disc_stack( [ CNDisc( radius, radius ) ], nodes ), seed )
  kind = CNKernelKind.riesz( 2.0, 3 )
  base = assemble( kind, cloud, beta = 1.0, threads = threads )
  evaluations = []

  def capacity_at( beta ):
    values = np.array( base.values, copy = True )
    np.fill_diagonal( values, kind.self_values( cloud.points, beta * cloud.cell_radius ) )
    K = CNKernelMatrix( values, kind, base.indices, cloud, { 'rule': 'separation', 'beta': beta } )
    capacity = equilibrium_measure( cloud.a1, K, cloud )[1]
    evaluations.append( ( beta, capacity ) )
    return capacity

  def excess( beta ):
    return capacity_at( beta ) - target

  # 'floor' is the largest beta seen below the target, 'ceiling' the
  # smallest one seen to lose definiteness
  floor = ceiling = None
  for _ in range( CALIBRATION_STEPS ):
    try:
      above = excess( high )
    except NotPositiveDefinite:
      logger.debug( "beta %.6g loses definiteness, lowering the bracket", high )
      ceiling = high
      high = 0.5 * ( ceiling + ( 0.0 if floor is None else floor ) )
      continue
    if ( above >= 0.0 ):
      break
    floor = high
    high = 2.0 * high if ceiling is None else 0.5 * ( high + ceiling )
  else:
    raise InfeasibleSpec( "no positive definite beta reaches the target capacity", target = target,
      high = high )
  if ( floor is not None ):
    low = floor
  else:
    low = min( low, 0.5 * high )
    for _ in range( CALIBRATION_STEPS ):
      if ( excess( low ) <= 0.0 ):
        break
      high, low = low, 0.1 * low
    else:
      raise InfeasibleSpec( "the target capacity is below every capacity reachable for beta >= {:.6g}".format( low ),
        target = target )

  beta = brentq( excess, low, high, xtol = 1e-12 * high, rtol = 1e-10, maxiter = 200 )
  capacity = capacity_at( beta )
  logger.info( "beta %.8g gives capacity %.8g for a disc of radius %g (%d nodes)", beta, capacity, radius, nodes )
  return {
    'beta': beta,
    'target': target,
    'capacity': capacity,
    'bracket': [ low, high ],
    'radius': radius,
    'nodes': nodes,
    'evaluations': len( evaluations ),
  }


# ----------------------------------------------------

class CNExperimentTest( TestCase ):

  def test_ball_problem( self ):
    problem = ball_example( a1_nodes = 60, a2_nodes = 150, seed = 2 )
    self.assertTrue( problem.domain.is_ball() )
    self.assertAlmostEqual( problem.constraint.total_mass, 2.0, places = 9 )
    self.assertTrue( problem.field.is_zero() )
    self.assertEqual( problem.green.diagonal_rule['rule'], 'balayage' )
    self.assertEqual( len( problem.a2 ), 150 )

  def test_ball_problem_passes_verification( self ):
    from condenser.cnsolver import solve_riesz_via_bridge
    from condenser.cnverify import verify_all
    problem = ball_example( a1_nodes = 200, a2_nodes = 1500, seed = 0, truncation_factor = 50.0 )
    solution = solve_riesz_via_bridge( problem, tolerance = 1e-9 )
    reports = verify_all( solution, probes = 1000, seed = 0 )
    zone, support = reports['zone'], reports['support']
    self.assertLessEqual( zone['riesz_green_gap'], zone['threshold'] )
    self.assertLessEqual( zone['a2_probe_ratio'], zone['threshold'] )
    self.assertLessEqual( support['mass_gap'], 0.01 )
    self.assertGreater( support['interior_mass'], 0.0 )
    self.assertTrue( reports['frostman']['passed'] )
    self.assertTrue( reports['passed'] )

  def test_disc_series_constraint( self ):
    problem = disc_series_example( levels = 3, nodes_per_disc = 20, a2_nodes = 150 )
    cloud = problem.cloud
    for k in range( 3 ):
      nodes = cloud.part_indices( k )
      self.assertAlmostEqual( problem.xi.mass( nodes ), 1.0 / ( k + 1 ) ** 2, places = 9 )
    self.assertAlmostEqual( problem.constraint.total_mass, 1.0 + 0.25 + 1.0 / 9.0, places = 9 )

  def test_disc_series_needs_two_discs( self ):
    with self.assertRaises( InfeasibleSpec ):
      disc_series_example( levels = 1, nodes_per_disc = 20, a2_nodes = 50 )

  def test_place_discs_scales_energy( self ):
    domain = CNDomain.halfspace( 3, 2.0 )
    template, unit, unit_energy = disc_template( domain, 30 )
    cloud = place_discs( template, [ ( 3.0, np.array( [ 1.0, 2.0 ] ), 0.25 ) ] )
    riesz = assemble( CNKernelKind.riesz( 2.0, 3 ), cloud )
    self.assertAlmostEqual( quadratic( unit, riesz ) * 0.25 / unit_energy, 1.0, places = 9 )
    self.assertTrue( np.allclose( cloud.points[:, 0], 3.0 ) )

  def test_short_circuit_trend( self ):
    report = short_circuit_experiment( levels = 2, nodes_per_disc = 12, plane_resolution = 0.25 )
    self.assertTrue( report['decreasing'] )
    self.assertGreater( report['decay_exponent'], 0.0 )
    self.assertTrue( all( v > 0.0 for v in report['identity'] ) )
    self.assertLessEqual( max( report['identity_gap'] ), IDENTITY_AGREEMENT )
    self.assertTrue( report['identity_ok'] )
    self.assertAlmostEqual( report['plane_spacing'], 0.125 )
    self.assertGreater( report['a2_nodes'], report['a1_nodes'] )
    self.assertGreater( report['truncation_radius'], 100.0 * 3.0 )

  def test_short_circuit_sizes_the_plane_by_level( self ):
    domain = CNDomain.halfspace( 3, 2.0 )
    coarse = shell_count( 2, 0.0, 400.0, 0.5, flat = 3.0, growth = 0.5 )
    fine = shell_count( 2, 0.0, 400.0, 0.25, flat = 3.0, growth = 0.5 )
    # quartering the cell area over the footprint of radius 3
    self.assertGreater( fine - coarse, 300 )
    with self.assertRaises( InfeasibleSpec ):
      short_circuit_experiment( levels = 2, domain = domain, plane_resolution = 0.0 )

  def test_short_circuit_needs_halfspace( self ):
    with self.assertRaises( UnsupportedDomain ):
      short_circuit_experiment( domain = CNDomain.ball( [ 0.0, 0.0, 0.0 ], 1.0 ) )

  def test_unbounded_constraint( self ):
    report = unbounded_constraint_experiment( levels = 5, nodes_per_disc = 20 )
    self.assertTrue( report['decreasing'] )
    self.assertTrue( report['norms_within_bound'] )
    self.assertLessEqual( report['final_ratio'], UNBOUNDED_FINAL_RATIO )
    for optimum, value in zip( report['optima'], report['piece_values'] ):
      self.assertLessEqual( optimum, value * ( 1.0 + 1e-6 ) )

  def test_counterexample( self ):
    report = counterexample_experiment( terms = 5, nodes_per_disc = 25 )
    self.assertEqual( report['c2_over_r'], [ 1.0 ] * 5 )
    self.assertAlmostEqual( sum( report['c'] ), 1.0 - 2.0 ** -5 )
    self.assertTrue( report['green_bounded'] )
    self.assertTrue( report['riesz_growth'] )
    self.assertTrue( report['epsilon_below_one'] )
    self.assertTrue( report['passed'] )
    self.assertGreater( report['riesz_per_term_min'], 0.5 * report['unit_disc_energy'] )

  def test_counterexample_ball_variant( self ):
    report = counterexample_experiment( terms = 3, nodes_per_disc = 20, variant = 'ball' )
    for flat, round_ in zip( report['riesz_partial_sums'], report['ball_riesz_partial_sums'] ):
      self.assertAlmostEqual( round_ / flat, 1.0, places = 8 )
    self.assertLessEqual( max( report['ball_green_partial_sums'] ), GREEN_PARTIAL_BOUND )

  def test_disc_capacity_scales_linearly( self ):
    small, _ = capacity_experiment( radius = 0.5, nodes = 150 )
    large, _ = capacity_experiment( radius = 2.0, nodes = 150 )
    self.assertAlmostEqual( large['capacity'] / small['capacity'], 4.0, places = 6 )
    self.assertIn( 'quoted_2r_over_pi2', small['reference'] )

  def test_unknown_capacity_shape( self ):
    with self.assertRaises( InfeasibleSpec ):
      capacity_experiment( shape = 'cube' )

  def test_calibrate_beta_hits_target( self ):
    result = calibrate_beta( nodes = 120 )
    self.assertAlmostEqual( result['capacity'], 2.0 / math.pi, places = 6 )
    low, high = result['bracket']
    self.assertTrue( low <= result['beta'] <= high )

  def test_calibrate_beta_lowers_an_indefinite_bracket( self ):
    result = calibrate_beta( nodes = 120, high = 50.0 )
    self.assertAlmostEqual( result['capacity'], 2.0 / math.pi, places = 6 )
    self.assertLess( result['beta'], 50.0 )

  def test_quoted_disc_capacity( self ):
    result = calibrate_beta( nodes = 120, reference = 'quoted' )
    self.assertAlmostEqual( result['target'], 2.0 / math.pi ** 2, places = 12 )
    self.assertAlmostEqual( result['capacity'], 0.2026, places = 4 )
    for radius in ( 0.5, 1.0, 2.0 ):
      report, _ = capacity_experiment( radius = radius, nodes = 120, beta = result['beta'], reference = 'quoted' )
      self.assertEqual( report['compared_with'], 'quoted_2r_over_pi2' )
      self.assertLess( report['relative_error'], 0.03 )
    with self.assertRaises( InfeasibleSpec ):
      disc_reference( 1.0, 'newtonian' )

  def test_read_node_values( self ):
    problem = disc_series_example( levels = 2, nodes_per_disc = 10, a2_nodes = 40 )
    path = os.path.join( tempfile.mkdtemp(), 'weights.csv' )
    with open( path, 'w', newline = '' ) as out:
      out.write( "index,weight\n0,0.5\n3,1.25\n" )
    values = read_node_values( path, problem.cloud, 'weight', 'constraint.path' )
    self.assertEqual( values[0], 0.5 )
    self.assertEqual( values[3], 1.25 )
    self.assertEqual( values.sum(), 1.75 )
    with self.assertRaises( ConfigError ) as caught:
      read_node_values( path, problem.cloud, 'value', 'field.path' )
    self.assertEqual( caught.exception.field, 'field.path' )
