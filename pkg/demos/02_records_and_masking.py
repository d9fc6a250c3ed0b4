"""
Synthetic records, augmentation and masking
===========================================

Each record holds four image slots (current frontal/lateral, prior
frontal/lateral) plus a tokenized report. Absent slots are zero images.
"""

import numpy as np

from adaptalign.language import IGNORE_INDEX, TokenizedReport, WordPieceTokenizer, mask_tokens
from adaptalign.records import AugmentConfig, augment, corpus_stats, make_synthetic_corpus
from adaptalign.records import synthetic_vocab
from adaptalign.vision import VIEW_TAGS, mask_patches

rng = np.random.default_rng(0)
records = make_synthetic_corpus(200, 5, rng)
stats = corpus_stats(records)
print(stats.n_records, "records; with prior %.3f, with lateral %.3f" % (stats.frac_with_prior, stats.frac_with_lateral))

r = records[0]
print(r.record_id, "label", r.label, "present", [t for t in VIEW_TAGS if r.present[t]])
print("report:", r.report_text)
print("tokens:", r.report_tokens.tolist())

# absent views stay exactly zero
for t in VIEW_TAGS:
    print("  %s  present=%-5s  mean %.3f" % (t, r.present[t], r.images[t].mean()))

# augmentation: crop, rotation, colour jitter, sentence shuffle
aug = augment(r, np.random.default_rng(1), AugmentConfig())
print("augmented tokens:", aug.report_tokens.tolist())

# image masking: 75% of 196 patches
part = mask_patches(196, 0.75, np.random.default_rng(2))
print(len(part.masked_idx), "masked,", len(part.non_masked_idx), "kept")

# text masking: half of the non-class tokens
tok = WordPieceTokenizer(synthetic_vocab())
t = tok("there is effusion in the left lung . the heart size is normal .")
m = mask_tokens(TokenizedReport(t.ids), 0.5, np.random.default_rng(3))
print("ids    ", t.ids.tolist())
print("masked ", m.ids.tolist())
print("targets", [x if x != IGNORE_INDEX else "." for x in m.targets.tolist()])
