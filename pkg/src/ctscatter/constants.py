"""Physical constants shared by the physics and transport code."""

# CODATA 2018 classical electron radius [cm]. Some published transport papers
# print 2.9817938e-13 here; that value is a transposition typo.
R0_CM = 2.8179403262e-13
R0_SQ_BARN = R0_CM * R0_CM * 1e24  # r0^2 in barns

MEC2_KEV = 510.99895  # electron rest energy [keV]
HC_KEV_ANGSTROM = 12.398  # photon wavelength [A] = HC / E[keV]
AVOGADRO = 6.02214076e23

MIN_ENERGY_KEV = 1.0
MAX_ENERGY_KEV = 1000.0
