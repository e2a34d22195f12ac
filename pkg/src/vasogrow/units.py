"""Unit conventions and conversion constants.

The whole package works in a kg-mm-s system:

=============  ======================  =====================
quantity       unit                    notes
=============  ======================  =====================
length         mm
flow           mm^3/s
pressure       kg mm^-1 s^-2           = 1e3 Pa = 1 kPa
viscosity      kg mm^-1 s^-1           1 cP = 1e-6 kg/(mm s)
power density  kg mm^-1 s^-3           1 uW/mm^3 = 1 kg/(mm s^3)
permeability   mm^3 s kg^-1
=============  ======================  =====================

Derivations::

    1 cP = 1e-3 Pa s = 1e-3 kg/(m s) = 1e-6 kg/(mm s)
    1 uW/mm^3 = 1e-6 W/mm^3 = 1e-6 kg m^2 s^-3 / mm^3
              = 1e-6 * 1e6 kg mm^2 s^-3 / mm^3 = 1 kg mm^-1 s^-3

so metabolic power densities quoted in uW/mm^3 carry over numerically
unchanged, and viscosities in cP are multiplied by 1e-6.
"""

# multiply a value in centipoise by this to get kg mm^-1 s^-1
CENTIPOISE = 1.0e-6

# multiply a value in uW/mm^3 by this to get kg mm^-1 s^-3 (identity!)
MICROWATT_PER_MM3 = 1.0

# multiply a value in kPa by this to get kg mm^-1 s^-2 (identity)
KILOPASCAL = 1.0
