"""A reduced soft-versus-hard label study (the full one runs in the acceptance tests).

Run: python demos/soft_vs_hard.py   (a few minutes on one core)
"""

from softseg.study import StudyConfig, directional_checks, run_soft_vs_hard

cfg = StudyConfig(n_images=80, epochs=12, seeds=(1,))
result = run_soft_vs_hard(cfg, on_run=lambda arm, seed, r: print(
    f"{arm:16s} seed {seed}: macro dice {r.macro_dice:.3f} dice {r.dice:.3f} macro softdice {r.macro_softdice:.3f}"))
chk = directional_checks(result)
print(f"soft labels beat majority-vote CE on macro dice by {chk['soft_macro_dice'] - chk['hardce_macro_dice']:+.3f}")
print(f"soft fine labels vs training on patterns directly, dice {chk['soft_dice'] - chk['coarse_dice']:+.3f}")
print(f"{result.seconds / 60:.1f} min")
