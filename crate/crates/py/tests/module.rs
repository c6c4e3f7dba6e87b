use pyo3::ffi::c_str;
use pyo3::prelude::*;
use std::sync::Once;
use steervec::steervec;

static INIT: Once = Once::new();

fn with_module<F: FnOnce(Python<'_>)>(f: F) {
    INIT.call_once(|| {
        pyo3::append_to_inittab!(steervec);
        pyo3::prepare_freethreaded_python();
    });
    Python::with_gil(f);
}

#[test]
fn module_runs_a_small_pipeline() {
    with_module(|py| {
        py.run(
            c_str!(
                r#"
import steervec as sv
ds = sv.generate(sv.BiasConfig(n_train=300, n_val=100, n_test=200, seed=2))
train, val, test = sv.split(ds, (0.5, 1/6, 1/3), True, 0)
model = sv.Model.init(sv.ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16))
model, report = sv.train_erm(model, train, val, sv.TrainConfig(epochs=1, batch_size=32))
assert len(report.epoch_losses) == 1
cands = sv.extract_candidates(model, train.select_group(0, 0), train.select_minority(0), 0)
assert cands[0].degenerate and not cands[1].degenerate
res = sv.sweep(model, cands, val)
r = sv.evaluate(model, test, sv.Intervention.single(res.direction))
assert 0.0 <= r.wga <= r.aga <= 1.0
assert sv.ablate_vector([3.0, 4.0], [0.0, 1.0]) == [3.0, 0.0]
"#
            ),
            None,
            None,
        )
        .map_err(|e| {
            e.print(py);
            e
        })
        .unwrap();
    });
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(|py| {
        py.run(
            c_str!(
                r#"
import steervec as sv
try:
    sv.BiasConfig(rho=0.3).validate()
    raise AssertionError("rho accepted")
except ValueError:
    pass
try:
    sv.Model.load("/nonexistent/checkpoint.stvp")
    raise AssertionError("missing file accepted")
except OSError:
    pass
try:
    sv.ablate_vector([1.0, 2.0], [0.0, 0.0])
    raise AssertionError("zero direction accepted")
except ValueError:
    pass
"#
            ),
            None,
            None,
        )
        .map_err(|e| {
            e.print(py);
            e
        })
        .unwrap();
    });
}
