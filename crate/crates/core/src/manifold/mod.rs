//! Embeddings, clustering scores, smoothing and community detection.

mod graph;
mod pca;
mod scores;
mod series;
mod umap;

pub use graph::{knn_graph, leiden, rb_quality, ClusterAssignment, KnnGraph, WeightedGraph};
pub use pca::{pca, Pca};
pub use scores::{calinski_harabasz, lowess, minmax_normalize, silhouette, CALINSKI_HARABASZ_CAP};
pub use series::{build_curves, score_embedding, score_series, LabelKind, Metric, MetricCurve, ScoreSeries, LOWESS_FRAC};
pub use umap::{embed_2d, fit_ab, fuzzy_graph, nearest_neighbors, scaled_neighbors, Embedding2D, UmapConfig};
