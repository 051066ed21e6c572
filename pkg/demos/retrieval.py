"""Retrieval in generated-weight space.

After training, each person's generated (K, D) weight matrix is an
embedding of how that person ages. Flattening it and ranking a gallery by
Euclidean distance retrieves people the model treats alike. On synthetic
data the generator's hidden truth is known, so we can check whether
nearest neighbors really share the query's age-offset sign, and whether
the farthest ones don't.

Run: python3 demos/retrieval.py
"""

import numpy as np

from persage.data import SynthConfig, split, synth_generate
from persage.metalearner import Dims
from persage.metrics import retrieve, slice_agreement, weight_embedding
from persage.training import TrainConfig, train

CONFIG = SynthConfig(n_identities=100, samples_per_identity=8, n_classes=61,
                     age_dim=48, id_dim=24, latent_dim=4, offset_max=4.0,
                     feature_noise=0.01, rbf_width=4.0, seed=11)


def main():
    dataset, _ = synth_generate(CONFIG)
    train_set, test_set = split(dataset, (0.8, 0.2), seed=CONFIG.seed,
                                by_identity=True)
    cfg = TrainConfig(dims=Dims(n_classes=61, age_dim=48, id_dim=24,
                                hidden_dim=64),
                      epochs=15, batch_size=32, lr=5e-3, seed=3,
                      target_mode="hard_onehot")
    model = train(train_set, cfg)

    emb = np.stack([weight_embedding(model.meta, h)
                    for h in test_set.id_feats])
    offsets = test_set.latent_offsets
    print(f"gallery: {emb.shape[0]} test samples, embedding dim "
          f"{emb.shape[1]} (= K * D), identities unseen in training")
    print()

    q = 0
    result = retrieve(emb[q], emb, query_index=q)
    print(f"query: sample {q}, identity {test_set.identity_ids[q]}, "
          f"true offset {offsets[q]:+.2f}")
    print("nearest neighbors (the query itself ranks first at distance 0):")
    for rank in range(6):
        i = result.ranked_indices[rank]
        print(f"  rank {rank}: sample {i:>3}  identity "
              f"{test_set.identity_ids[i]:>3}  offset {offsets[i]:+.2f}  "
              f"distance {result.distances[rank]:.3f}")
    print("farthest entries:")
    for rank in range(len(test_set) - 3, len(test_set)):
        i = result.ranked_indices[rank]
        print(f"  rank {rank}: sample {i:>3}  identity "
              f"{test_set.identity_ids[i]:>3}  offset {offsets[i]:+.2f}  "
              f"distance {result.distances[rank]:.3f}")
    print()

    # same question over every query: do the nearest 10% share the query's
    # offset sign more often than the farthest 10%?
    signs = offsets > 0
    tops, bottoms = [], []
    for i in range(len(test_set)):
        r = retrieve(emb[i], emb, query_index=i)
        top, bottom = slice_agreement(r, signs == signs[i], fraction=0.10)
        tops.append(top)
        bottoms.append(bottom)
    print(f"offset-sign agreement, averaged over all {len(test_set)} "
          f"queries:")
    print(f"  nearest 10%:  {np.mean(tops):.3f}")
    print(f"  farthest 10%: {np.mean(bottoms):.3f}")


if __name__ == "__main__":
    main()
