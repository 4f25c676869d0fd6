"""Experiment: untrained recall vs depth; trained recall vs schedule."""
import time
import numpy as np

from ctlkit import backbone, codec, synthdata, training
from ctlkit.evaluation import EvalProtocol, recall_at_k, retrieval_cases
from ctlkit.matcher import IndexMode

spec = synthdata.SynthSpec(
    n_objects=50, n_faces=2, dim=32, gallery_views=5, query_views=3,
    n_picks=250, noise_sigma=0.1, seed=7,
)
import tempfile, pathlib
tmp = pathlib.Path(tempfile.mkdtemp())
t0 = time.perf_counter()
paths = synthdata.gen_identification_dataset(spec, tmp)
print(f"gen: {time.perf_counter()-t0:.2f}s")
data = codec.load_identification_data(paths["gallery_manifest"], paths["picks_manifest"])
train_picks, hold_picks = training.split_picks(data.picks, 0.2, seed=7)
train_data = codec.IdentificationData(data.descriptors, data.gallery, tuple(train_picks))
hold_data = codec.IdentificationData(data.descriptors, data.gallery, tuple(hold_picks))
print(f"train picks {len(train_picks)}, holdout {len(hold_picks)}")

def untrained_recall(dims, seed):
    enc = backbone.init_encoder(dims, seed)
    cases = retrieval_cases(hold_data, enc, EvalProtocol.POST_PICK, IndexMode.CENTROID)
    return recall_at_k(cases, 1)

for dims in ([32,16], [32,16,16], [32,24,16,16], [32,16,16,16,16], [32,16,16,16,16,16,16]):
    rs = [untrained_recall(dims, s) for s in range(5)]
    print(f"dims {dims}: untrained recall@1 = {['%.3f'%r for r in rs]}")

# identity (raw descriptors) baseline
cases = retrieval_cases(hold_data, None, EvalProtocol.POST_PICK, IndexMode.CENTROID)
print(f"raw descriptors recall@1 = {recall_at_k(cases, 1):.3f}")
