#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fcl/corpus.hpp"
#include "fcl/model.hpp"
#include "fcl/tensor.hpp"
#include "json.hpp"

namespace fcl::geometry {

/// Content rows of the softmax matrix with their vocabulary ids.
struct EmbeddingMatrix {
  Tensor w;              // [V x d]
  std::vector<int> ids;  // vocabulary id of each row
};

/// Reserved tokens are dropped.
EmbeddingMatrix softmax_embeddings(const model::ModelParams& p);

inline constexpr std::size_t kExactPairLimit = 5000;
inline constexpr std::size_t kSampledPairs = 1000000;

struct PairSampling {
  /// Row counts at or above this switch to sampling.
  std::size_t exact_limit = kExactPairLimit;
  std::size_t samples = kSampledPairs;
  std::uint64_t seed = 0;
};

/// Mean over unordered distinct pairs, exact or sampled.
struct PairEstimate {
  double value = 0.0;
  double std_error = 0.0;  // 0 when exact
  bool exact = true;
  std::size_t pairs = 0;
};

/// log of the mean Gaussian potential exp(-2 |u_i - u_j|^2) over unit rows.
/// The reported statistic is its negation.
PairEstimate uniformity(const Tensor& w, const PairSampling& sampling = {});

/// Mean L2 distance between unit rows over unordered distinct pairs.
/// `rows` selects a subset; empty means all rows.
PairEstimate avg_pairwise_distance(const Tensor& w, std::span<const std::size_t> rows = {},
                                   const PairSampling& sampling = {});

struct BucketDistance {
  int bucket = 0;
  std::size_t rows = 0;
  std::optional<double> distance;  // absent when the bucket has < 2 rows
};

/// Within-bucket average distance, buckets ordered frequent -> rare.
std::vector<BucketDistance> bucket_distance_report(const EmbeddingMatrix& m, const corpus::BucketAssignment& buckets,
                                                   const PairSampling& sampling = {});

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Tensor vectors;              // [n x n], column k pairs with values[k]
};

/// Cyclic Jacobi rotations. Eigenvectors are ordered by descending value and
/// signed so that their largest-magnitude component is positive.
SymmetricEigen symmetric_eigen(const Tensor& a, double tol = 1e-10, int max_sweeps = 100);

/// F(c) = sum_i exp(c . w_i) over c in {+-eigenvectors of W^T W}.
std::vector<double> partition_values(const Tensor& w);
double isotropy_i1(const Tensor& w);
double isotropy_i2(const Tensor& w);

struct Pca {
  Tensor coords;                    // [V x 2]
  std::array<double, 2> variance{};  // top two covariance eigenvalues
  std::array<double, 2> ratio{};     // share of total variance
};

Pca pca_2d(const Tensor& w);

struct GeometryReport {
  double neg_uniformity = 0.0;
  double avg_distance = 0.0;
  double i1 = 0.0;
  double i2 = 0.0;
  std::vector<BucketDistance> per_bucket;
  Pca pca;
};

GeometryReport analyze(const EmbeddingMatrix& m, const corpus::BucketAssignment& buckets,
                       const PairSampling& sampling = {});

nlohmann::json to_json(const GeometryReport& r);

/// `token_id,token,bucket,x,y` with `bucket` from `groups` (High/Medium/Low).
std::string pca_csv(const EmbeddingMatrix& m, const Pca& pca, const corpus::Vocabulary& vocab,
                    const corpus::BucketAssignment& groups);
std::string pca_svg(const EmbeddingMatrix& m, const Pca& pca, const corpus::BucketAssignment& groups);

/// Text dump: header `V d`, then one row of 17 significant digits per line.
void write_embedding_dump(const std::filesystem::path& path, const Tensor& w);
Tensor read_embedding_dump(const std::filesystem::path& path);

}  // namespace fcl::geometry
