use std::fmt::Display;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use memdom::bench::{run_syscall_bench, BenchConfig, BenchError};
use memdom::domain::{BackendChoice, DomainError};
use memdom::minios::{self, OsError};
use memdom::monitor::{self, MonitorError, SandboxFrame};
use memdom::policy::{self, ParseOptions, PolicyError};

create_exception!(memdom_py, MemdomError, PyException, "Base class for memdom errors.");
create_exception!(memdom_py, PolicySyntaxError, MemdomError, "The policy failed to compile.");
create_exception!(memdom_py, IsolationFault, MemdomError, "An access outside the current grant.");

fn plain(e: impl Display) -> PyErr {
    MemdomError::new_err(e.to_string())
}

fn policy_err(e: PolicyError) -> PyErr {
    PolicySyntaxError::new_err(format!("{}: {e}", e.code()))
}

fn domain_err(e: DomainError) -> PyErr {
    if e.is_isolation_fault() {
        IsolationFault::new_err(e.to_string())
    } else {
        plain(e)
    }
}

fn monitor_err(e: MonitorError) -> PyErr {
    match e {
        MonitorError::Domain(d) => domain_err(d),
        other => plain(other),
    }
}

fn os_err(e: OsError) -> PyErr {
    match e {
        OsError::IsolationFault(d) => domain_err(d),
        other => plain(other),
    }
}

fn backend(name: &str) -> PyResult<BackendChoice> {
    name.parse().map_err(PyValueError::new_err)
}

/// Compiles policy source to canonical ACL text.
#[pyfunction]
#[pyo3(signature = (source, pages = policy::DEFAULT_POOL_PAGES))]
fn compile_policy(source: &str, pages: u32) -> PyResult<String> {
    let parsed = policy::parse_policy_with(source, &ParseOptions { default_pages: pages })
        .map_err(policy_err)?;
    Ok(String::from_utf8(policy::serialize_acl(&parsed.acl)).expect("ACL text is ASCII"))
}

/// Lint findings as a JSON array.
#[pyfunction]
#[pyo3(signature = (source, pages = policy::DEFAULT_POOL_PAGES))]
fn lint_policy(source: &str, pages: u32) -> String {
    policy::lint_policy(source, &ParseOptions { default_pages: pages }).to_json()
}

/// Runs the syscall benchmark and returns the report as JSON.
#[pyfunction]
#[pyo3(name = "bench", signature = (syscalls, iterations = 10_000, runs = 5, backend = "checked"))]
fn run_bench(syscalls: Vec<String>, iterations: u64, runs: usize, backend: &str) -> PyResult<String> {
    let config = BenchConfig { backend: self::backend(backend)?, syscalls, iterations, runs };
    let report = run_syscall_bench(&config).map_err(|e| match e {
        BenchError::Os(os) => os_err(os),
        other => PyValueError::new_err(other.to_string()),
    })?;
    Ok(report.to_json())
}

/// A monitor over a compiled policy, driven from one Python thread.
#[pyclass(unsendable, name = "Monitor")]
struct PyMonitor {
    inner: monitor::Monitor,
    frames: Vec<SandboxFrame>,
}

#[pymethods]
impl PyMonitor {
    #[new]
    #[pyo3(signature = (source, backend = "checked"))]
    fn new(source: &str, backend: &str) -> PyResult<Self> {
        let acl = policy::parse_policy(source).map_err(policy_err)?;
        let inner = monitor::Monitor::new(&acl, self::backend(backend)?).map_err(monitor_err)?;
        Ok(PyMonitor { inner, frames: Vec::new() })
    }

    #[getter]
    fn backend(&self) -> &'static str {
        self.inner.backend_kind().as_str()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[pyo3(signature = (object, size = None))]
    fn alloc(&self, object: &str, size: Option<usize>) -> PyResult<()> {
        self.inner.alloc_object(object, size).map(drop).map_err(monitor_err)
    }

    fn free(&self, object: &str) -> PyResult<()> {
        self.inner.free_object(object).map_err(monitor_err)
    }

    /// Opens a sandbox for `func`; pair with `revoke`.
    fn grant(&mut self, func: &str) -> PyResult<usize> {
        let frame = self.inner.grant_data_access(func).map_err(monitor_err)?;
        self.frames.push(frame);
        Ok(self.frames.len())
    }

    /// Closes the innermost sandbox opened through `grant`.
    fn revoke(&mut self) -> PyResult<()> {
        let frame = self.frames.pop().ok_or_else(|| plain("no open sandbox"))?;
        if let Err(e) = self.inner.revoke_data_access(&frame) {
            self.frames.push(frame);
            return Err(monitor_err(e));
        }
        Ok(())
    }

    /// Calls `body()` inside a sandbox for `func`.
    fn call(&self, func: &str, body: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let out = self.inner.sandboxed_call(func, || body.call0()).map_err(monitor_err)?;
        Ok(out?.unbind())
    }

    fn read<'py>(&self, py: Python<'py>, object: &str, offset: usize, n: usize) -> PyResult<Bound<'py, PyBytes>> {
        let mut buf = vec![0; n];
        self.inner.read_object(object, offset, &mut buf).map_err(monitor_err)?;
        Ok(PyBytes::new(py, &buf))
    }

    fn write(&self, object: &str, offset: usize, data: &[u8]) -> PyResult<()> {
        self.inner.write_object(object, offset, data).map_err(monitor_err)
    }

    fn check_size(&self, object: &str, size: u64) -> PyResult<bool> {
        match self.inner.check_input_size(object, size) {
            Ok(()) => Ok(true),
            Err(MonitorError::SizeExceeded { .. }) => Ok(false),
            Err(e) => Err(monitor_err(e)),
        }
    }

    /// Mode of `domain` on this thread: "none", "ro" or "rw".
    fn mode(&self, domain: &str) -> PyResult<&'static str> {
        let m = self.inner.manager();
        let key = m.key_of(domain).map_err(domain_err)?;
        Ok(match m.mode(key) {
            memdom::domain::AccessMode::None => "none",
            memdom::domain::AccessMode::ReadOnly => "ro",
            memdom::domain::AccessMode::ReadWrite => "rw",
        })
    }

    fn bookkeeping_bytes(&self) -> usize {
        self.inner.bookkeeping().total_bytes
    }
}

/// The bundled library OS under its shipped policy.
#[pyclass(unsendable, name = "MiniOs")]
struct PyMiniOs {
    inner: minios::MiniOs,
}

#[pymethods]
impl PyMiniOs {
    #[new]
    #[pyo3(signature = (backend = "checked", mode = "protected"))]
    fn new(backend: &str, mode: &str) -> PyResult<Self> {
        let mode: minios::Mode = mode.parse().map_err(PyValueError::new_err)?;
        let inner = minios::MiniOs::boot(self::backend(backend)?, mode).map_err(os_err)?;
        Ok(PyMiniOs { inner })
    }

    #[pyo3(signature = (path, flags = minios::flags::READ))]
    fn open(&self, path: &str, flags: u32) -> PyResult<u32> {
        self.inner.open(path, flags).map_err(os_err)
    }

    fn close(&self, fd: u32) -> PyResult<()> {
        self.inner.close(fd).map_err(os_err)
    }

    fn read<'py>(&self, py: Python<'py>, fd: u32, n: usize) -> PyResult<Bound<'py, PyBytes>> {
        let data = self.inner.read(fd, n).map_err(os_err)?;
        Ok(PyBytes::new(py, &data))
    }

    fn write(&self, fd: u32, data: &[u8]) -> PyResult<usize> {
        self.inner.write(fd, data).map_err(os_err)
    }

    fn stat<'py>(&self, py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
        stat_dict(py, self.inner.stat(path).map_err(os_err)?)
    }

    fn fstat<'py>(&self, py: Python<'py>, fd: u32) -> PyResult<Bound<'py, PyDict>> {
        stat_dict(py, self.inner.fstat(fd).map_err(os_err)?)
    }

    fn mkdir(&self, path: &str) -> PyResult<()> {
        self.inner.mkdir(path).map_err(os_err)
    }

    fn unlink(&self, path: &str) -> PyResult<()> {
        self.inner.unlink(path).map_err(os_err)
    }

    fn mount(&self, path: &str) -> PyResult<()> {
        self.inner.mount(path).map_err(os_err)
    }

    fn mmap(&self, len: usize) -> PyResult<u64> {
        self.inner.mmap_anon(len).map_err(os_err)
    }

    fn munmap(&self, region: u64) -> bool {
        self.inner.release_region(region)
    }

    fn mounts(&self) -> PyResult<Vec<String>> {
        let table = self.inner.mount_table().map_err(os_err)?;
        Ok(table.into_iter().map(|m| m.path).collect())
    }
}

fn stat_dict(py: Python<'_>, s: minios::StatBuf) -> PyResult<Bound<'_, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("vnode", s.vnode)?;
    d.set_item("is_dir", s.kind == minios::layout::NodeKind::Dir)?;
    d.set_item("size", s.size)?;
    d.set_item("dev", s.dev)?;
    Ok(d)
}

#[pymodule]
fn memdom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("MemdomError", py.get_type::<MemdomError>())?;
    m.add("PolicySyntaxError", py.get_type::<PolicySyntaxError>())?;
    m.add("IsolationFault", py.get_type::<IsolationFault>())?;
    m.add("ACL_HEADER", policy::ACL_HEADER)?;
    m.add("O_READ", minios::flags::READ)?;
    m.add("O_WRITE", minios::flags::WRITE)?;
    m.add("O_CREAT", minios::flags::CREATE)?;
    m.add("O_TRUNC", minios::flags::TRUNC)?;
    m.add("O_EXCL", minios::flags::EXCL)?;
    m.add_function(wrap_pyfunction!(compile_policy, m)?)?;
    m.add_function(wrap_pyfunction!(lint_policy, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_class::<PyMonitor>()?;
    m.add_class::<PyMiniOs>()?;
    Ok(())
}
