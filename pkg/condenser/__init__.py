# The condenser app: discrete alpha-Riesz and alpha-Green minimum energy
# problems on generalized condensers, and the management commands that
# run them.
