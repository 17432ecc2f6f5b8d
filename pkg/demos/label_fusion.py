"""Three simulated raters disagree on a synthetic core; fuse them three ways.

Run: python demos/label_fusion.py
"""

import numpy as np

from softseg.agreement import pixel_agreement_stats
from softseg.fusion import majority_vote, staple_multiclass
from softseg.ontology import load_ontology
from softseg.synthkit import gleason_study_config, synth_image

onto = load_ontology()
cfg = gleason_study_config(seed=3, size=64, ontology=onto)
item = synth_image(cfg, 0, onto)
fg = item.scene.foreground
print(f"core: {fg.sum()} foreground pixels, true classes {sorted(set(item.scene.truth[fg].tolist()))}")

# soft labels: the per-pixel average of the rater votes
soft = item.soft_labels(onto)
levels = np.unique(np.round(soft.probs[fg] * 3).astype(int))
print(f"soft label values (x3): {levels.tolist()}")

# hard labels: strict plurality, ties are left out of hard metrics
maj = majority_vote(soft)
print(f"unique majority on {maj.valid.sum() / fg.sum():.1%} of foreground at the explanation level")
coarse = majority_vote(soft.remap(onto, "pattern"))
print(f"unique majority on {coarse.valid.sum() / fg.sum():.1%} of foreground at the pattern level")

# STAPLE weighs each rater by its estimated reliability
labels = np.stack([np.where(m.weights.sum(-1) > 0, m.weights.argmax(-1), 0) for m in item.raters])
res = staple_multiclass(labels, classes=10)
print(f"STAPLE consensus matches truth on {(res.consensus[fg] == item.scene.truth[fg]).mean():.1%} of the core")

pa = pixel_agreement_stats([soft])
for name, share in zip(onto.short_names("explanation"), pa.shares):
    if pa.counts[onto.short_names("explanation").index(name)].sum():
        print(f"  {name:28s} 1/2/3 raters: " + " ".join(f"{s:.2f}" for s in share))
