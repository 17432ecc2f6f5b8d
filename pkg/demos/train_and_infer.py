"""Train the mini U-Net on soft labels, predict a full image and remap to patterns.

Run: python demos/train_and_infer.py [out_dir]   (well under a minute on one core)
"""

import sys
from pathlib import Path

import numpy as np

from softseg.imaging import write_png
from softseg.inference import predict_remapped, render_overlay, sliding_window_predict
from softseg.metrics import evaluate
from softseg.model import TrainerConfig, TrainSample, train
from softseg.ontology import load_ontology
from softseg.synthkit import generate_corpus, gleason_study_config

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
onto = load_ontology()
corpus = generate_corpus(gleason_study_config(seed=0, size=48, ontology=onto), 40, onto)
samples = [TrainSample(it.scene.image.pixels, it.soft_labels(onto)) for it in corpus]
train_set, val_set, test_set = samples[:30], samples[30:35], samples[35:]

cfg = TrainerConfig(lr0=3e-3, batch_size=12, epochs=10, patch_size=32, seed=1, loss="softdice")
result = train(cfg, train_set, val_set, onto, out_dir=out / "run",
               on_epoch=lambda e: print(f"epoch {e['epoch']:2d} train {e['train_loss']:.4f} val {e['val_loss']:.4f}"))
model = result.best.model()
print(f"best epoch {result.best.epoch}")

preds = [sliding_window_predict(model, s.image, window=32, overlap=0.5) for s in test_set]
report = evaluate([p.probs for p in preds], [s.labels for s in test_set], onto, "pattern", trained_level="explanation")
print(f"test, remapped to patterns: macro softdice {report.macro_softdice:.3f} dice {report.dice:.3f} "
      f"macro dice {report.macro_dice:.3f}")

pattern = predict_remapped(preds[0], onto, "pattern")
pattern.foreground = test_set[0].labels.foreground
write_png(out / "overlay_pattern.png", render_overlay(test_set[0].image, pattern, onto))
print(f"overlay written to {out / 'overlay_pattern.png'}")
