"""End to end on synthetic data, through the library API.

Generates a small corpus, cleans the notes, pretrains embeddings,
builds the 24-hour cohort with grouped 5-fold splits, trains the
notes model on one fold, and reports test AUROC / AUPRC.

Takes a minute or two. Run with: python demos/05_small_pipeline.py
The CLI drives the same stages with artifacts and manifests on disk:
see README.md.
"""

import numpy as np

from notemort import cohort, models, pipeline, traineval
from notemort.embed import train_skipgram
from notemort.synth import SynthConfig, generate_synthetic

tables = generate_synthetic(
    SynthConfig(n_subjects=400, prevalence=0.2, signal_strength=1.0), seed=7
)
admissions = {a.hadm_id: a for a in tables.admissions}
print(f"synthetic corpus: {len(tables.admissions)} stays, {len(tables.notes)} notes")

prep = pipeline.preprocess_notes(tables.notes, min_count=10, note_len=64)
print(f"cleaned: vocabulary {prep.vocab.size}, {len(prep.model_notes)} model notes")

embeddings = train_skipgram(
    prep.embedding_sentences, prep.vocab, dim=24, window=5, epochs=3, seed=1
).embeddings

window = 24
wc = pipeline.build_window_cohort(prep.model_notes, admissions, tables.icustays, window)
prevalence = np.mean([wc.labels[h] for h in wc.eligible])
print(f"W={window} cohort: {len(wc.eligible)} stays, prevalence {prevalence:.3f}")

dataset = pipeline.build_dataset(wc)
folds = cohort.grouped_kfold(wc.eligible, wc.subject_of, k=5, seed=0)
cohort.validate_folds(folds, wc.subject_of)

model_cfg = models.ModelConfig(
    note_len=64, embed_dim=24, filters=16, temporal_hidden=8, cts_hidden=(8, 4)
)
train_cfg = traineval.TrainConfig(epochs=12, early_stop_patience=4, seed=0)
result = traineval.train_fold(
    models.NOTES_HCR, folds[0], dataset, model_cfg, train_cfg, embeddings
)
print(f"fold 0: stopped after {len(result.history)} epochs, "
      f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.4f}")

scores, labels = result.metric_inputs(dataset, "test")
print(f"test AUROC {traineval.auroc(scores, labels):.4f}, "
      f"AUPRC {traineval.auprc(scores, labels):.4f}")
