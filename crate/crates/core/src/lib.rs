pub mod geom;
pub mod map;
pub mod path;
pub mod raycast;
pub mod sim;
pub mod localize;
pub mod ftg;
pub mod pursuit;
pub mod lattice;
pub mod rbf;
pub mod v2v;
pub mod monitor;
pub mod tracks;
pub mod scenario;
pub mod presets;
pub mod plot;
pub mod pipeline;
