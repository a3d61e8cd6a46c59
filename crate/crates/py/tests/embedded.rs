use sigctl_py::sigctl_module;
use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn module_runs_inside_an_embedded_interpreter() {
    pyo3::append_to_inittab!(sigctl_module);
    pyo3::prepare_freethreaded_python();
    Python::with_gil(|py| {
        let locals = PyDict::new_bound(py);
        py.run_bound(
            r#"
import sigctl
s = sigctl.signature([0.0, 1.0], [[0.0], [2.0]], 2)
assert abs(s["22"] - 2.0) < 1e-12
p = sigctl.Policy.new("linear", 2, 1)
p.params = [0.5, 0.0, 0.0]
assert p(s) == [0.5]
try:
    sigctl.Policy.new("cubic", 2, 1)
    raise AssertionError("expected ValueError")
except ValueError:
    pass
rate, value = sigctl.twap()
result = value
"#,
            None,
            Some(&locals),
        )
        .unwrap();
        let j: f64 = locals.get_item("result").unwrap().unwrap().extract().unwrap();
        assert!((j - 0.99901).abs() < 1e-5);
    });
}
