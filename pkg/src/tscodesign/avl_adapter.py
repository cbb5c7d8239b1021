"""Adapter point for an external vortex-lattice solver (stub).

The real high-fidelity pipeline exchanges plain-text case files with an
external executable. The formats are fixed here so a working adapter only
needs to shell out and feed the files through; this build ships the format
writers and the output parser, with execution unsupported.

Geometry case file (one record per line, '#' comments ignored):

    SECTION <y> <x_le> <z_le> <chord> <twist_deg>
    CONTROL <chord_fraction> <y_inner> <y_outer>

Run case file:

    ALPHA <deg>
    BETA <deg>
    DELTA1 <deg>
    DELTA2 <deg>
    RATES <p_hat> <q_hat> <r_hat>

Coefficient output (parsed): lines of the form ``<name> = <value>`` with
names CX, CY, CZ, Cl, Cm, Cn.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import DesignVector, Planform


class AdapterUnavailableError(RuntimeError):
    """The external solver is not wired up in this build."""


def write_geometry_case(d: DesignVector, planform: Planform) -> str:
    lines = [
        "# tscodesign geometry case v1",
        f"# S={planform.S:.6f} b={planform.b:.6f} c={planform.c:.6f}",
        f"SECTION 0.000000 0.000000 0.000000 {d.c_sym:.6f} 0.000000",
        f"SECTION {d.y_fus:.6f} {d.x_fus:.6f} {d.z_fus:.6f} {d.c_fus:.6f} {math.degrees(d.gamma_fus):.6f}",
        f"SECTION {d.y_tip:.6f} {d.x_tip:.6f} {d.z_tip:.6f} {d.c_tip:.6f} {math.degrees(d.gamma_tip):.6f}",
        f"CONTROL {d.f_con:.6f} {d.y_fus:.6f} {d.y_tip:.6f}",
    ]
    return "\n".join(lines) + "\n"


def write_run_case(alpha, beta=0.0, delta1=0.0, delta2=0.0, omega_hat=(0.0, 0.0, 0.0)) -> str:
    p, q, r = omega_hat
    return (
        "# tscodesign run case v1\n"
        f"ALPHA {math.degrees(alpha):.6f}\n"
        f"BETA {math.degrees(beta):.6f}\n"
        f"DELTA1 {math.degrees(delta1):.6f}\n"
        f"DELTA2 {math.degrees(delta2):.6f}\n"
        f"RATES {p:.6f} {q:.6f} {r:.6f}\n"
    )


_OUTPUT_KEYS = {"CX": "C_X", "CY": "C_Y", "CZ": "C_Z", "Cl": "C_phi", "Cm": "C_theta", "Cn": "C_psi"}


def parse_coefficient_table(text: str) -> dict:
    """Coefficient dict from solver output; raises on missing entries."""
    values = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line or "=" not in line:
            continue
        name, _, rhs = line.partition("=")
        name = name.strip()
        if name in _OUTPUT_KEYS:
            values[_OUTPUT_KEYS[name]] = float(rhs)
    missing = set(_OUTPUT_KEYS.values()) - set(values)
    if missing:
        raise ValueError(f"coefficient output missing {sorted(missing)}")
    return values


class ExternalVortexLatticeProvider:
    """Placeholder provider for the subprocess-based pipeline."""

    def __init__(self, design: DesignVector, planform: Planform):
        self.design = design
        self.planform = planform
        self.geometry_case = write_geometry_case(design, planform)

    def coefficients(self, alpha, beta=0.0, delta1=0.0, delta2=0.0, omega_hat=None):
        raise AdapterUnavailableError("external vortex-lattice execution unsupported")

    def coefficient_means(self, X: np.ndarray):
        raise AdapterUnavailableError("external vortex-lattice execution unsupported")
