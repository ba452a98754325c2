# manage.py balayage --config run.toml [--point x1 x2 ... xn]
#
# Sweeps the normalized constraint of a run config (or the unit Dirac
# measure at --point) onto the A2 plate and reports the energy identity
# ||mu - mu'||^2 = ||mu||^2 - ||mu'||^2.  When the Green kernel of the
# domain has a closed form, the Green potential obtained from the sweep is
# compared against it on the A1 nodes.

import numpy as np

from condenser.cnbalayage import balayage, dirac_balayage, energy_identity_report
from condenser.cnerrors import EXIT_OK, InfeasibleSpec
from condenser.cnexperiment import build_problem
from condenser.cnkernel import riesz_values
from condenser.cnmeasure import energy, potential
from condenser.management.cncommand import CNCommand


# max over A1 of | (U^eps_y - U^eps_y')(x) - g(x, y) | relative to max g
def dirac_green_gap( problem, y, swept ):
  a1 = problem.a1
  points = problem.cloud.points[a1]
  riesz = problem.riesz
  swept_potential = potential( swept, riesz, a1 )
  direct = riesz_values( points, y[None, :], riesz.kind.alpha, riesz.kind.dimension )[:, 0]
  closed = problem.green.kind.pair_values( points, y[None, :] )[:, 0]
  return float( np.max( np.abs( direct - swept_potential - closed ) ) / max( float( np.max( closed ) ), 1e-300 ) )


class Command( CNCommand ):

  help = "Sweep a measure from D onto the A2 plate and check the balayage energy identity."
  needs_config = True

  def add_command_arguments( self, parser ):
    parser.add_argument( '--point', type = float, nargs = '+', help = "pole of a Dirac measure in D" )

  def run( self, config, options ):
    problem = build_problem( config )
    if ( problem.riesz is None ):
      raise InfeasibleSpec( "balayage needs an A2 plate", config = config.name )
    closed_form = problem.green.kind.has_closed_form()
    writer = self.writer( config )

    if ( options.get( 'point' ) ):
      y = np.asarray( options['point'], dtype = float )
      if ( len( y ) != problem.domain.dimension ):
        raise InfeasibleSpec( "--point needs one coordinate per dimension", dimension = problem.domain.dimension )
      swept = dirac_balayage( y, problem.cloud, problem.riesz, problem.domain )
      report = { 'pole': y, 'swept_mass': swept.mass(), 'exact_projection': swept.meta['exact_projection'] }
      if ( closed_form ):
        report['green_gap'] = dirac_green_gap( problem, y, swept )
    else:
      mu = problem.xi.normalized()
      swept = balayage( mu, problem.riesz )
      report = energy_identity_report( mu, problem.riesz, swept )
      if ( closed_form ):
        report['closed_form_green_energy'] = energy( mu, mu, problem.green )
      report['riesz_energy'] = energy( mu, mu, problem.riesz )

    writer.write_config( config )
    writer.write_measure( 'swept.csv', swept )
    writer.write_json( 'balayage.json', report )
    writer.write_manifest( self.command_name, config, problem.cloud )
    for name, value in sorted( report.items() ):
      if ( isinstance( value, float ) ):
        self.say( "  {:<26} {:.8g}".format( name, value ) )
    return EXIT_OK, None, report
