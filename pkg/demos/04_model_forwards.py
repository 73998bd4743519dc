"""The three model graphs on one toy patient.

Run with: python demos/04_model_forwards.py
"""

from datetime import datetime

import numpy as np

from notemort import models
from notemort.cohort import ClinicalTimeSeries, N_TS_VARIABLES, TS_NORMALS
from notemort.embed import EmbeddingMatrix
from notemort.notesproc import CleanNote, PatientFile, truncate_pad

cfg = models.ModelConfig(
    note_len=32, embed_dim=16, filters=16, temporal_hidden=8, cts_hidden=(8, 4)
)
rng = np.random.default_rng(0)

vectors = rng.standard_normal((60, cfg.embed_dim)) * 0.4
vectors[0] = 0.0  # pad row
embeddings = EmbeddingMatrix(vectors)

notes = []
for i in range(3):  # three notes charted over the stay
    ids, mask = truncate_pad(rng.integers(1, 60, size=20).tolist(), max_len=32)
    notes.append(CleanNote(
        tokens=ids, mask=mask, charted_at=datetime(2150, 1, 1, 2 + 7 * i),
        category="Nursing", hadm_id=1, row_id=i + 1,
    ))
file = PatientFile(hadm_id=1, subject_id=1, notes=notes, label=False, window_hours=24)

ts = ClinicalTimeSeries(
    hadm_id=1, hours=np.arange(24),
    values=TS_NORMALS + rng.standard_normal((24, N_TS_VARIABLES)),
    mask=rng.random((24, N_TS_VARIABLES)) > 0.25,
)

notes_params = models.init_notes_hcr(cfg, seed=1)
cts_params = models.init_cts_rnn(cfg, seed=2)
mm_params = models.init_mm_hcr(cfg, seed=3)

print("parameter counts")
for name, params in (("notes-hcr", notes_params), ("cts-rnn", cts_params),
                     ("mm-hcr", mm_params)):
    print(f"  {name:10s} {models.parameter_count(params):7d}")

p_notes = models.notes_hcr_forward(file, embeddings, notes_params, cfg)
features, p_cts = models.cts_rnn_forward(ts, cts_params, cfg)
p_mm = models.mm_hcr_forward(file, ts, embeddings, mm_params, cfg)

print("\nmortality probabilities (untrained weights)")
print(f"  notes-hcr  {float(p_notes.data):.4f}   (3 notes -> shared encoder -> GRU)")
print(f"  cts-rnn    {float(p_cts.data):.4f}   (24h physiology, features {features.shape})")
print(f"  mm-hcr     {float(p_mm.data):.4f}   (patient vector || cts features)")

# with the default configuration these are the full-scale sizes
full = models.ModelConfig()
print("\nfull-scale parameter counts (default configuration)")
print(f"  notes-hcr  {models.parameter_count(models.init_notes_hcr(full)):7d}")
print(f"  cts-rnn    {models.parameter_count(models.init_cts_rnn(full)):7d}")
print(f"  mm-hcr     {models.parameter_count(models.init_mm_hcr(full)):7d}")
