"""Physical constants shared across the package (km, s, kg)."""

MU_EARTH = 398600.4415  # km^3/s^2
R_EARTH = 6378.1363  # km
OMEGA_EARTH = 7.292115146706979e-5  # rad/s, sidereal rate

MU_SUN = 1.32712440018e11  # km^3/s^2
MU_MOON = 4902.800066  # km^3/s^2
AU_KM = 149597870.700

SOLAR_PRESSURE = 4.56e-6  # N/m^2 at 1 AU
EPOCH_JD = 2455200.5  # scenario epoch (UTC, treated as TT for ephemerides)

# 1 um/s^2 expressed in km/s^2
UM_S2 = 1e-9
