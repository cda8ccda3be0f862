mod toy2d;
mod trace;
mod verify;

pub(crate) use toy2d::{sweep, toy2d};
pub(crate) use trace::{heatmap, trace};
pub(crate) use verify::verify;
