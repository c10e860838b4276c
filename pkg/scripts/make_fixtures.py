"""Regenerate the synthetic-design fixtures shipped in ``climfuse/data``.

The consensus fields, dependence matrices and run-level ranges are
artifact-chosen stand-ins: smooth fields, unit-diagonal clustered ``V`` and
ranges in [0.1, 0.5].  Run once; the JSON output is committed.
"""

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "climfuse" / "data"

TABLE_S1 = [
    ("ACCESS1-0", 1), ("ACCESS1-3", 1), ("BNU-ESM", 1), ("CCSM4", 6), ("CESM1-BGC", 1),
    ("CESM1-CAM5", 3), ("CMCC-CM", 1), ("CMCC-CMS", 1), ("CNRM-CM5", 1), ("CSIRO-Mk3-6-0", 10),
    ("CanESM2", 5), ("EC-EARTH", 4), ("FGOALS-g2", 1), ("FIO-ESM", 3), ("GFDL-CM3", 1),
    ("GFDL-ESM2G", 1), ("GFDL-ESM2M", 1), ("GISS-E2-H", 5), ("GISS-E2-H-CC", 1), ("GISS-E2-R", 5),
    ("GISS-E2-R-CC", 1), ("HadGEM2-AO", 1), ("HadGEM2-CC", 1), ("HadGEM2-ES", 4), ("IPSL-CM5A-LR", 4),
    ("IPSL-CM5A-MR", 1), ("IPSL-CM5B-LR", 1), ("MIROC-ESM", 1), ("MIROC-ESM-CHEM", 1), ("MIROC5", 3),
    ("MPI-ESM-LR", 3), ("MPI-ESM-MR", 1), ("MRI-CGCM3", 1), ("NorESM1-M", 1), ("NorESM1-ME", 1),
    ("bcc-csm1-1", 1), ("bcc-csm1-1-m", 1), ("inmcm4", 1),
]

# model families (1-based indices into TABLE_S1) and their within-family correlation
FAMILIES = [
    ((1, 2), 0.5), ((4, 5, 6), 0.85), ((7, 8), 0.8), ((15, 16, 17), 0.6), ((18, 19, 20, 21), 0.7),
    ((22, 23, 24), 0.8), ((25, 26, 27), 0.6), ((28, 29, 30), 0.7), ((31, 32), 0.9), ((34, 35), 0.9),
    ((36, 37), 0.8),
]


def consensus_fields(size):
    axis = np.linspace(0.0, 1.0, size)
    xx, yy = np.meshgrid(axis, axis)
    x, y = xx.ravel(), yy.ravel()
    mu_h = 1.5 * np.sin(2 * np.pi * x) * np.cos(np.pi * y) + 0.5 * (x + y)
    mu_f = mu_h + 2.0 + 0.5 * np.cos(np.pi * x) * np.sin(np.pi * y)
    return mu_h, mu_f


def clustered_v(M, families):
    v = np.eye(M)
    for members, rho in families:
        idx = [i - 1 for i in members if i <= M]
        for a in idx:
            for b in idx:
                if a != b:
                    v[a, b] = rho
    assert np.linalg.eigvalsh(v).min() > 0
    return v


def write(name, size, names, runs_h, runs_f, n_obs, v, seed, extra=None):
    rng = np.random.default_rng(seed)
    M = len(names)
    mu_h, mu_f = consensus_fields(size)
    payload = {
        "name": name,
        "note": "artifact-chosen stand-in values for the consensus fields, V and run ranges",
        "grid_size": size,
        "n_obs": n_obs,
        "model_names": names,
        "runs_h": list(runs_h),
        "runs_f": list(runs_f),
        "mu_h": np.round(mu_h, 12).tolist(),
        "mu_f": np.round(mu_f, 12).tolist(),
        "v": v.tolist(),
        "gamma_hm": np.round(rng.uniform(0.1, 0.5, M), 6).tolist(),
        "gamma_fm": np.round(rng.uniform(0.1, 0.5, M), 6).tolist(),
    }
    payload.update(extra or {})
    (OUT / f"{name}.json").write_text(json.dumps(payload, indent=1) + "\n")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    names = [n for n, _ in TABLE_S1]
    counts = [c for _, c in TABLE_S1]
    v38 = clustered_v(38, FAMILIES)
    write("paper", 20, names, [10] * 38, [10] * 38, 5, v38, 1, {"cmip5_runs": counts, "cmip5_n_obs": 2})
    desk_v = clustered_v(6, [((2, 3, 4), 0.85), ((5, 6), 0.5)])
    write("desk", 8, [f"model{i + 1}" for i in range(6)], [3] * 6, [3] * 6, 3, desk_v, 2)
    write("desk_cmip5", 8, names[:10], counts[:10], counts[:10], 2, v38[:10, :10], 3)


if __name__ == "__main__":
    main()
