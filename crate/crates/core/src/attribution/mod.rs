//! Decoder-norm attribution of features to models, and tracking of the
//! top-attributed features across checkpoints.

pub mod histogram;
pub mod matching;
pub mod norms;
pub mod ranking;

pub use histogram::{histogram, Histogram};
pub use matching::{
    match_all, match_features, overlap_matrix, FeatureMatching, MatchedPair, OverlapMatrix, DEFAULT_MIN_COSINE,
};
pub use norms::{decoder_l1_norms, mas, nrn, FeatureNorms, MasTable, NrnVector};
pub use ranking::{
    rank_by_nrn, rank_shift, rank_values, RankShiftRow, RankShiftTable, RankedEntry, RankedFeatures, DEFAULT_TOP_N,
};
