"""
How the controller conditions the instrument
============================================

Slower closed loops let the feedback echo the excitation for longer,
which shows up as a large summed response ``T_inf`` from ``c`` to ``f``.
A short sweep with a few seeds prints both quantities side by side. With
so few seeds, and instruments this weak, the ranking of the errors is
noisy; the acceptance suite runs the full 20-seed version at N = 6400.
"""

from scipy.stats import spearmanr
import numpy as np

from laurentid.experiments import ExperimentConfig, run_experiment

cfg = ExperimentConfig.from_dict({"plant": "example4", "N_grid": [1600], "trials": 4, "estimators": ["iv"]})
table = run_experiment(cfg)

names = list(dict.fromkeys(r["controller"] for r in table.rows))
t_inf, med = [], []
for name in names:
    t_inf.append(table.select(controller=name)[0]["t_infinity"])
    med.append(np.median(table.column("error", controller=name)))
    print(f"{name:>9}: T_inf {t_inf[-1]:8.1f}, median IV error {med[-1]:.3f}")

print(f"Spearman(T_inf, error) = {spearmanr(t_inf, med)[0]:+.2f}")
