//! The forecasting network, nearest-neighbor interpolation and gridded
//! reanalysis.

mod geo;
mod grid;
mod interp;
mod net;

pub use geo::{haversine, knn_query, Neighbors, EARTH_RADIUS_M};
pub use grid::{
    colormap, grid_axis, read_grid_csv, reanalyze_grid, write_station_predictions, BoundingBox,
    ReanalysisGrid, StationPrediction,
};
pub use interp::{
    feature_weights, idw_weights, knn_interpolate, neighbor_weights, KnnWeightMode,
    StationFeatures, IDW_EPSILON_M,
};
pub use net::{AqNet, AqNetConfig, ForwardVars, Prediction};
