"""Pre-populate the artifact cache the acceptance suite reads.

Running this is equivalent to letting pytest train on first use; it exists
so the long trainings can run unattended and be inspected as they land.
"""

import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from tests.conftest import ArtifactStore, ARTIFACTS, DATA_DIR, ENSEMBLE_SEEDS, LENET_BITS


def main():
    store = ArtifactStore(ARTIFACTS, DATA_DIR)
    jobs = []
    jobs.append(("lenet5 fp32", lambda: store.lenet_fp32()))
    for bits in LENET_BITS:
        jobs.append((f"lenet5 {bits}-bit", lambda b=bits: store.lenet(b)))
    for seed in ENSEMBLE_SEEDS:
        jobs.append((f"mlp1 seed {seed}", lambda s=seed: store.ensemble("mlp1", s)))
    jobs.append(("mlp1 single member", lambda: store.single_member("mlp1", 1, 0.5)))
    for seed in ENSEMBLE_SEEDS:
        jobs.append((f"mlp1 flat seed {seed}",
                     lambda s=seed: store.ensemble("mlp1", s, thresholds=(0.5,) * 5,
                                                   tag="_flat")))
    for seed in ENSEMBLE_SEEDS:
        jobs.append((f"mlp2 seed {seed}", lambda s=seed: store.ensemble("mlp2", s)))
    for name, job in jobs:
        t0 = time.time()
        _, info = job()
        print(f"{name}: acc {info['test_accuracy']:.4f} "
              f"(wall {info['wall_seconds']:.0f}s, this call {time.time() - t0:.0f}s)",
              flush=True)


if __name__ == "__main__":
    main()
