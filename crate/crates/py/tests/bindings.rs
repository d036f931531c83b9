use pyo3::prelude::*;
use pyv2pdet::pyv2pdet;

fn with_module(code: &std::ffi::CStr) -> PyResult<()> {
    pyo3::append_to_inittab!(pyv2pdet);
    Python::attach(|py| py.run(code, None, None))
}

#[test]
fn module_round_trip() {
    with_module(
        c"
import pyv2pdet as v
a = v.Box3D([0, 0, 0], [4, 2, 1.5], 0.0)
b = v.Box3D([1, 0, 0], [4, 2, 1.5], 0.0)
assert abs(a.iou_3d(b) - 0.6) < 1e-9
assert abs(v.iou_bev(a, b) - 0.6) < 1e-9
cfg = v.Config.desk()
assert v.Config.from_toml(cfg.to_toml()).to_toml() == cfg.to_toml()
pts, boxes, cls = v.synth_scene(1)
again = v.synth_scene(1)
assert again[0] == pts and again[1] == boxes
cfg.train_steps = 1
det, losses = v.train_detector(cfg, [(pts, boxes, cls)])
assert [l['step'] for l in losses] == [0]
out = det.infer(pts, confidence='aligned-iou')
assert all(0.0 <= d['confidence'] <= 1.0 for d in out)
assert v.average_precision([(0, x, 1.0) for x in boxes], [boxes], 0.7) == 1.0
try:
    v.Box3D([0, 0, 0], [0, 1, 1], 0.0)
    raise AssertionError('zero size accepted')
except ValueError:
    pass
",
    )
    .unwrap();
}
