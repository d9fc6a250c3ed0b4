"""
Adapters on frozen towers
=========================

Build the toy model, check that fresh adapters leave the towers untouched,
then count parameters for the full-size preset without allocating it.
"""

import numpy as np
import torch
from dataclasses import replace

from adaptalign.model import AlignmentModel, ModelConfig, build_model
from adaptalign.records import make_synthetic_corpus
from adaptalign.trainer import collate

torch.set_num_threads(1)

# toy config: 32x32 images in 4x4 patches, width 32, two blocks per tower
cfg = ModelConfig.toy()
model = build_model(cfg, seed=0)
print(cfg.n_patches, "patches per view")

# every parameter is either trainable or frozen, nothing in between
acct = model.accounting()
print("toy trainable", acct["trainable"], "frozen", acct["frozen"], "fraction %.3f" % acct["fraction"])

# same weights without adapters
plain = AlignmentModel(replace(cfg, adapters=False))
plain.load_state_dict({k: v for k, v in model.state_dict().items() if "adapter" not in k})

batch = collate(make_synthetic_corpus(4, 2, np.random.default_rng(0)))
with torch.no_grad():
    a = model.embed_images(batch.images).global_
    b = plain.embed_images(batch.images).global_
print("max difference at init", (a - b).abs().max().item())  # up-projections start at zero

# full-size towers on the meta device: shapes only, no memory
with torch.device("meta"):
    big = AlignmentModel(ModelConfig.vit_b_bert_base())
acct = big.accounting()
print("ViT-B + BERT-base trainable", acct["trainable"], "of", acct["trainable"] + acct["frozen"],
      "(%.1f%%)" % (100 * acct["fraction"]))

# where the trainable parameters live
groups = {}
for name, p in big.trainable_parameters():
    key = "adapters" if "adapter" in name else name.split(".")[0]
    groups[key] = groups.get(key, 0) + p.numel()
for key, n in sorted(groups.items(), key=lambda kv: -kv[1]):
    print("  %-16s %9d" % (key, n))
