//! C ABI for sterf: build networks from presets or config text and
//! measure spatial and temporal ERFs into caller-owned buffers.
//!
//! Every fallible call returns a [`SterfStatus`]; on failure the message is
//! available from [`sterf_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sterf::blocks::{preset, Network, ReadAt};
use sterf::config::parse_arch_config;
use sterf::erf::{spatial_erf, spread_metrics, temporal_erf, ChannelAgg, ErfOptions, Grid, DEFAULT_SAMPLES};
use sterf::oracle::Span;
use sterf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SterfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Shape = 10,
    Dimension = 11,
    Parameter = 12,
    Reference = 13,
    Numeric = 14,
    Config = 15,
    Syntax = 16,
    Mode = 17,
    Size = 18,
    Domain = 19,
    Io = 20,
    Format = 21,
    Panic = 99,
}

impl From<&Error> for SterfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => Self::Shape,
            Error::Dimension(_) => Self::Dimension,
            Error::Parameter(_) => Self::Parameter,
            Error::Reference(_) => Self::Reference,
            Error::Numeric { .. } => Self::Numeric,
            Error::Config(_) => Self::Config,
            Error::Syntax { .. } => Self::Syntax,
            Error::Mode(_) => Self::Mode,
            Error::Size(_) => Self::Size,
            Error::Domain(_) => Self::Domain,
            Error::Io { .. } => Self::Io,
            Error::Format(_) => Self::Format,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SterfReadAt {
    NetworkInput = 0,
    StageInput = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SterfChannels {
    Sum = 0,
    Mean = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SterfErfOptions {
    pub samples: usize,
    pub seed: u64,
    pub channels: SterfChannels,
    pub read_at: SterfReadAt,
    /// 0 selects STERF_THREADS or all cores.
    pub threads: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SterfSpread {
    pub r95: f64,
    pub centroid_row: f64,
    pub centroid_col: f64,
    pub mass_entropy: f64,
    pub zero_mass: bool,
}

/// Opaque network handle.
pub struct SterfNetwork {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SterfStatus, msg: impl Into<String>) -> SterfStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), SterfStatus>) -> SterfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SterfStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(SterfStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: sterf::Result<T>) -> Result<T, SterfStatus> {
    r.map_err(|e| fail(SterfStatus::from(&e), e.to_string()))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, SterfStatus> {
    if p.is_null() {
        return Err(fail(SterfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SterfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a>(p: *const SterfNetwork) -> Result<&'a Network, SterfStatus> {
    p.as_ref()
        .map(|h| &h.net)
        .ok_or_else(|| fail(SterfStatus::NullPointer, "network handle is null"))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, SterfStatus> {
    p.as_mut()
        .ok_or_else(|| fail(SterfStatus::NullPointer, format!("{what} is null")))
}

fn convert_read_at(r: SterfReadAt) -> ReadAt {
    match r {
        SterfReadAt::NetworkInput => ReadAt::NetworkInput,
        SterfReadAt::StageInput => ReadAt::StageInput,
    }
}

fn options(o: Option<&SterfErfOptions>) -> ErfOptions {
    let o = o.copied().unwrap_or_else(|| sterf_erf_options_default());
    ErfOptions {
        samples: o.samples,
        seed: o.seed,
        channels: match o.channels {
            SterfChannels::Sum => ChannelAgg::Sum,
            SterfChannels::Mean => ChannelAgg::Mean,
        },
        read_at: convert_read_at(o.read_at),
        threads: (o.threads > 0).then_some(o.threads),
    }
}

unsafe fn publish(out: *mut *mut SterfNetwork, net: sterf::Result<Network>) -> Result<(), SterfStatus> {
    let slot = out_ptr(out, "out")?;
    *slot = std::ptr::null_mut();
    let net = lift(net)?;
    *slot = Box::into_raw(Box::new(SterfNetwork { net }));
    Ok(())
}

/// Protocol defaults: 60 samples, seed 0, channel sum, read at the network
/// input, automatic threads.
#[no_mangle]
pub extern "C" fn sterf_erf_options_default() -> SterfErfOptions {
    SterfErfOptions {
        samples: DEFAULT_SAMPLES,
        seed: 0,
        channels: SterfChannels::Sum,
        read_at: SterfReadAt::NetworkInput,
        threads: 0,
    }
}

/// Builds a preset network. `*out` is null on failure.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sterf_network_from_preset(name: *const c_char, out: *mut *mut SterfNetwork) -> SterfStatus {
    guard(|| {
        let spec = preset(text(name, "name")?);
        publish(out, spec.and_then(|s| Network::build(&s)))
    })
}

/// Builds a network from architecture config text.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sterf_network_from_config(config: *const c_char, out: *mut *mut SterfNetwork) -> SterfStatus {
    guard(|| {
        let spec = parse_arch_config(text(config, "config")?);
        publish(out, spec.and_then(|s| Network::build(&s)))
    })
}

/// # Safety
/// `net` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sterf_network_free(net: *mut SterfNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Total number of scalar parameters.
///
/// # Safety
/// `net` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sterf_network_param_count(net: *const SterfNetwork, out: *mut usize) -> SterfStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(net)?.param_count();
        Ok(())
    })
}

/// Input shape of one sample as (T, B, C, H, W).
///
/// # Safety
/// `net` must be a live handle and `shape` point to 5 writable values.
#[no_mangle]
pub unsafe extern "C" fn sterf_network_input_shape(net: *const SterfNetwork, shape: *mut usize) -> SterfStatus {
    guard(|| {
        let s = handle(net)?.input_shape(1);
        if shape.is_null() {
            return Err(fail(SterfStatus::NullPointer, "shape is null"));
        }
        std::slice::from_raw_parts_mut(shape, 5).copy_from_slice(&[s.t, s.b, s.c, s.h, s.w]);
        Ok(())
    })
}

/// Height and width of the spatial ERF grid for `probe` under `read_at`.
///
/// # Safety
/// `net` must be a live handle, `probe` a NUL-terminated string, `h` and
/// `w` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sterf_grid_shape(
    net: *const SterfNetwork,
    probe: *const c_char,
    read_at: SterfReadAt,
    h: *mut usize,
    w: *mut usize,
) -> SterfStatus {
    guard(|| {
        let net = handle(net)?;
        let p = lift(net.probe(text(probe, "probe")?))?;
        let span = Span::for_probe(&p, convert_read_at(read_at));
        let s = net.boundary_shape(span.read, 1);
        *out_ptr(h, "h")? = s.h;
        *out_ptr(w, "w")? = s.w;
        Ok(())
    })
}

unsafe fn fill(out: *mut f64, len: usize, values: &[f64]) -> Result<(), SterfStatus> {
    if out.is_null() {
        return Err(fail(SterfStatus::NullPointer, "output buffer is null"));
    }
    if len < values.len() {
        return Err(fail(
            SterfStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    std::slice::from_raw_parts_mut(out, values.len()).copy_from_slice(values);
    Ok(())
}

/// Spatial ERF of `probe`, written row-major into `out` (capacity `len`).
/// `opts` may be null for protocol defaults. `h` and `w` receive the grid
/// shape, also when the buffer is too small.
///
/// # Safety
/// `net` must be a live handle, `probe` a NUL-terminated string, `out`
/// writable for `len` doubles, `h` and `w` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sterf_spatial_erf(
    net: *const SterfNetwork,
    probe: *const c_char,
    opts: *const SterfErfOptions,
    out: *mut f64,
    len: usize,
    h: *mut usize,
    w: *mut usize,
) -> SterfStatus {
    guard(|| {
        let (h, w) = (out_ptr(h, "h")?, out_ptr(w, "w")?);
        let e = lift(spatial_erf(
            handle(net)?,
            text(probe, "probe")?,
            &options(opts.as_ref()),
        ))?;
        (*h, *w) = (e.grid.h, e.grid.w);
        fill(out, len, &e.grid.data)
    })
}

/// Temporal ERF of `probe`: `T` values, index = delay. `written` receives
/// `T`, also when the buffer is too small.
///
/// # Safety
/// `net` must be a live handle, `probe` a NUL-terminated string, `out`
/// writable for `len` doubles and `written` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sterf_temporal_erf(
    net: *const SterfNetwork,
    probe: *const c_char,
    opts: *const SterfErfOptions,
    out: *mut f64,
    len: usize,
    written: *mut usize,
) -> SterfStatus {
    guard(|| {
        let written = out_ptr(written, "written")?;
        let e = lift(temporal_erf(
            handle(net)?,
            text(probe, "probe")?,
            &options(opts.as_ref()),
        ))?;
        *written = e.values.len();
        fill(out, len, &e.values)
    })
}

/// Spread metrics of a row-major `h` x `w` grid.
///
/// # Safety
/// `grid` must be readable for `h * w` doubles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sterf_spread(grid: *const f64, h: usize, w: usize, out: *mut SterfSpread) -> SterfStatus {
    guard(|| {
        if grid.is_null() {
            return Err(fail(SterfStatus::NullPointer, "grid is null"));
        }
        let out = out_ptr(out, "out")?;
        let n = h
            .checked_mul(w)
            .ok_or_else(|| fail(SterfStatus::Size, "grid dimensions overflow"))?;
        let g = lift(Grid::new(h, w, std::slice::from_raw_parts(grid, n).to_vec()))?;
        let s = spread_metrics(&g);
        *out = SterfSpread {
            r95: s.r95,
            centroid_row: s.centroid.0,
            centroid_col: s.centroid.1,
            mass_entropy: s.mass_entropy,
            zero_mass: s.zero_mass,
        };
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sterf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}
