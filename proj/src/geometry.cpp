#include "fcl/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "fcl/error.hpp"

namespace fcl::geometry {

EmbeddingMatrix softmax_embeddings(const model::ModelParams& p) {
  const Tensor& w = p.softmax_weight.value();
  const std::size_t V = w.rows(), d = w.cols();
  const std::size_t first = corpus::kNumReserved;
  EmbeddingMatrix m;
  m.w = Tensor({V > first ? V - first : 0, d});
  for (std::size_t r = first; r < V; ++r) {
    for (std::size_t c = 0; c < d; ++c) m.w.at(r - first, c) = w.at(r, c);
    m.ids.push_back(static_cast<int>(r));
  }
  return m;
}

namespace {

Tensor unit_rows(const Tensor& w) {
  if (w.dim() != 2) throw Error(ErrorCode::ShapeMismatch, "expected a matrix, got " + shape_string(w.shape()));
  Tensor u = w;
  const std::size_t d = w.cols();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double n = 0.0;
    for (std::size_t c = 0; c < d; ++c) n += w.at(r, c) * w.at(r, c);
    n = std::sqrt(n);
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw Error(ErrorCode::DegenerateRow, "row " + std::to_string(r) + " has zero or non-finite norm", r);
    }
    for (std::size_t c = 0; c < d; ++c) u.at(r, c) /= n;
  }
  return u;
}

double sq_dist(const Tensor& u, std::size_t i, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < u.cols(); ++c) {
    const double diff = u.at(i, c) - u.at(j, c);
    s += diff * diff;
  }
  return s;
}

/// Mean of g(|u_i - u_j|^2) over pairs of `rows`, with the sample standard
/// error when sampling.
template <class G>
PairEstimate pair_mean(const Tensor& u, const std::vector<std::size_t>& rows, const PairSampling& sampling, G g) {
  const std::size_t n = rows.size();
  PairEstimate est;
  if (n < sampling.exact_limit) {
    double sum = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a + 1; b < n; ++b) sum += g(sq_dist(u, rows[a], rows[b]));
    }
    est.pairs = n * (n - 1) / 2;
    est.value = sum / static_cast<double>(est.pairs);
    return est;
  }
  RngStream rng(sampling.seed, RngPurpose::shuffle);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t k = 0; k < sampling.samples; ++k) {
    const std::size_t a = static_cast<std::size_t>(rng.index(n));
    std::size_t b = static_cast<std::size_t>(rng.index(n - 1));
    if (b >= a) ++b;
    const double v = g(sq_dist(u, rows[a], rows[b]));
    sum += v;
    sum_sq += v * v;
  }
  const double m = static_cast<double>(sampling.samples);
  est.exact = false;
  est.pairs = sampling.samples;
  est.value = sum / m;
  const double var = std::max(0.0, (sum_sq - m * est.value * est.value) / (m - 1.0));
  est.std_error = std::sqrt(var / m);
  return est;
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), 0);
  return r;
}

}  // namespace

PairEstimate uniformity(const Tensor& w, const PairSampling& sampling) {
  if (w.dim() != 2 || w.rows() < 2) throw Error(ErrorCode::SubsetTooSmall, "uniformity needs at least 2 rows");
  const Tensor u = unit_rows(w);
  PairEstimate e = pair_mean(u, all_rows(u.rows()), sampling, [](double d2) { return std::exp(-2.0 * d2); });
  // delta method for the log of the mean
  e.std_error = e.std_error / e.value;
  e.value = std::log(e.value);
  return e;
}

PairEstimate avg_pairwise_distance(const Tensor& w, std::span<const std::size_t> rows, const PairSampling& sampling) {
  std::vector<std::size_t> idx = rows.empty() ? all_rows(w.dim() == 2 ? w.rows() : 0)
                                              : std::vector<std::size_t>(rows.begin(), rows.end());
  if (idx.size() < 2) throw Error(ErrorCode::SubsetTooSmall, "average distance needs at least 2 rows");
  for (std::size_t r : idx) {
    if (r >= w.rows()) throw Error(ErrorCode::ShapeMismatch, "row index out of range", r);
  }
  const Tensor u = unit_rows(w);
  return pair_mean(u, idx, sampling, [](double d2) { return std::sqrt(d2); });
}

std::vector<BucketDistance> bucket_distance_report(const EmbeddingMatrix& m, const corpus::BucketAssignment& buckets,
                                                   const PairSampling& sampling) {
  std::map<int, std::size_t> row_of;
  for (std::size_t r = 0; r < m.ids.size(); ++r) row_of[m.ids[r]] = r;
  std::vector<BucketDistance> out;
  for (int b = 0; b < buckets.bucket_count; ++b) {
    std::vector<std::size_t> rows;
    for (int id : buckets.members[static_cast<std::size_t>(b)]) {
      auto it = row_of.find(id);
      if (it != row_of.end()) rows.push_back(it->second);
    }
    BucketDistance bd;
    bd.bucket = b;
    bd.rows = rows.size();
    if (rows.size() >= 2) bd.distance = avg_pairwise_distance(m.w, rows, sampling).value;
    out.push_back(bd);
  }
  return out;
}

SymmetricEigen symmetric_eigen(const Tensor& a_in, double tol, int max_sweeps) {
  if (a_in.dim() != 2 || a_in.rows() != a_in.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "eigen: expected a square matrix");
  }
  if (!a_in.all_finite()) throw Error(ErrorCode::EigenFailure, "eigen: non-finite input");
  const std::size_t n = a_in.rows();
  std::vector<double> a(a_in.data().begin(), a_in.data().end());
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto A = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };

  double scale = 0.0;
  for (double x : a) scale += x * x;
  scale = std::sqrt(scale);
  bool converged = n < 2 || scale == 0.0;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) off += A(i, j) * A(i, j);
    }
    if (std::sqrt(off) <= tol * 1e-3 * scale) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = A(p, q);
        if (apq == 0.0) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) off += A(i, j) * A(i, j);
    }
    if (std::sqrt(off) > tol * scale) throw Error(ErrorCode::EigenFailure, "eigen: Jacobi sweeps did not converge");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return A(x, x) > A(y, y); });
  SymmetricEigen out;
  out.vectors = Tensor({n, n});
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t col = order[k];
    out.values.push_back(A(col, col));
    std::size_t big = 0;
    for (std::size_t r = 1; r < n; ++r) {
      if (std::abs(v[r * n + col]) > std::abs(v[big * n + col])) big = r;
    }
    const double sign = v[big * n + col] < 0.0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < n; ++r) out.vectors.at(r, k) = sign * v[r * n + col];
  }
  return out;
}

std::vector<double> partition_values(const Tensor& w) {
  if (w.dim() != 2 || w.rows() < 2 || w.cols() < 1) {
    throw Error(ErrorCode::SubsetTooSmall, "isotropy needs at least 2 rows and 1 column");
  }
  const std::size_t V = w.rows(), d = w.cols();
  Tensor gram({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < V; ++r) s += w.at(r, i) * w.at(r, j);
      gram.at(i, j) = s;
      gram.at(j, i) = s;
    }
  }
  const SymmetricEigen eig = symmetric_eigen(gram);
  std::vector<double> f;
  for (std::size_t k = 0; k < d; ++k) {
    for (double sign : {1.0, -1.0}) {
      double total = 0.0;
      for (std::size_t r = 0; r < V; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += eig.vectors.at(c, k) * w.at(r, c);
        total += std::exp(sign * dot);
      }
      f.push_back(total);
    }
  }
  return f;
}

double isotropy_i1(const Tensor& w) {
  const auto f = partition_values(w);
  return *std::min_element(f.begin(), f.end()) / *std::max_element(f.begin(), f.end());
}

double isotropy_i2(const Tensor& w) {
  const auto f = partition_values(w);
  const double n = static_cast<double>(f.size());
  const double mean = std::accumulate(f.begin(), f.end(), 0.0) / n;
  double var = 0.0;
  for (double x : f) var += (x - mean) * (x - mean);
  return std::sqrt(var / n) / mean;
}

Pca pca_2d(const Tensor& w) {
  if (w.dim() != 2 || w.rows() < 3) throw Error(ErrorCode::SubsetTooSmall, "pca needs at least 3 rows");
  const std::size_t V = w.rows(), d = w.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < V; ++r) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += w.at(r, c);
  }
  for (double& m : mean) m /= static_cast<double>(V);
  Tensor x = w;
  for (std::size_t r = 0; r < V; ++r) {
    for (std::size_t c = 0; c < d; ++c) x.at(r, c) -= mean[c];
  }
  Tensor cov({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < V; ++r) s += x.at(r, i) * x.at(r, j);
      cov.at(i, j) = cov.at(j, i) = s / static_cast<double>(V - 1);
    }
  }
  const SymmetricEigen eig = symmetric_eigen(cov);
  double total = 0.0;
  for (double ev : eig.values) total += std::max(ev, 0.0);
  Pca out;
  out.coords = Tensor({V, 2});
  for (std::size_t k = 0; k < std::min<std::size_t>(2, d); ++k) {
    out.variance[k] = std::max(eig.values[k], 0.0);
    out.ratio[k] = total > 0.0 ? out.variance[k] / total : 0.0;
    for (std::size_t r = 0; r < V; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += x.at(r, c) * eig.vectors.at(c, k);
      out.coords.at(r, k) = s;
    }
  }
  return out;
}

GeometryReport analyze(const EmbeddingMatrix& m, const corpus::BucketAssignment& buckets,
                       const PairSampling& sampling) {
  GeometryReport r;
  r.neg_uniformity = -uniformity(m.w, sampling).value;
  r.avg_distance = avg_pairwise_distance(m.w, {}, sampling).value;
  r.i1 = isotropy_i1(m.w);
  r.i2 = isotropy_i2(m.w);
  r.per_bucket = bucket_distance_report(m, buckets, sampling);
  r.pca = pca_2d(m.w);
  return r;
}

nlohmann::json to_json(const GeometryReport& r) {
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& b : r.per_bucket) {
    buckets.push_back({{"id", b.bucket},
                       {"rows", b.rows},
                       {"distance", b.distance ? nlohmann::json(*b.distance) : nlohmann::json(nullptr)},
                       {"error", b.distance ? nlohmann::json(nullptr) : nlohmann::json("BucketTooSmall")}});
  }
  return {{"neg_uniformity", r.neg_uniformity},
          {"avg_distance", r.avg_distance},
          {"i1", r.i1},
          {"i2", r.i2},
          {"per_bucket_distance", buckets},
          {"pca_explained_variance", {r.pca.variance[0], r.pca.variance[1]}},
          {"pca_explained_ratio", {r.pca.ratio[0], r.pca.ratio[1]}}};
}

namespace {

const char* group_name(int b, int k) {
  if (k == 3) {
    static const char* names[] = {"High", "Medium", "Low"};
    return names[b];
  }
  return nullptr;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::string pca_csv(const EmbeddingMatrix& m, const Pca& pca, const corpus::Vocabulary& vocab,
                    const corpus::BucketAssignment& groups) {
  std::ostringstream os;
  os << "token_id,token,bucket,x,y\n";
  for (std::size_t r = 0; r < m.ids.size(); ++r) {
    const int id = m.ids[r];
    const int b = groups.bucket_of(id);
    const char* name = group_name(b, groups.bucket_count);
    os << id << ',' << vocab.token(id) << ',' << (name ? std::string(name) : std::to_string(b)) << ','
       << fmt(pca.coords.at(r, 0)) << ',' << fmt(pca.coords.at(r, 1)) << '\n';
  }
  return os.str();
}

std::string pca_svg(const EmbeddingMatrix& m, const Pca& pca, const corpus::BucketAssignment& groups) {
  const std::size_t V = m.ids.size();
  double lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
  for (std::size_t r = 0; r < V; ++r) {
    lo_x = std::min(lo_x, pca.coords.at(r, 0));
    hi_x = std::max(hi_x, pca.coords.at(r, 0));
    lo_y = std::min(lo_y, pca.coords.at(r, 1));
    hi_y = std::max(hi_y, pca.coords.at(r, 1));
  }
  const double size = 480.0, pad = 20.0;
  const double sx = hi_x > lo_x ? (size - 2 * pad) / (hi_x - lo_x) : 1.0;
  const double sy = hi_y > lo_y ? (size - 2 * pad) / (hi_y - lo_y) : 1.0;
  static const char* colors[] = {"#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t r = 0; r < V; ++r) {
    const int b = groups.bucket_of(m.ids[r]);
    const char* name = group_name(b, groups.bucket_count);
    os << "<circle class=\"" << (name ? std::string(name) : "b" + std::to_string(b)) << "\" cx=\""
       << pad + (pca.coords.at(r, 0) - lo_x) * sx << "\" cy=\"" << size - pad - (pca.coords.at(r, 1) - lo_y) * sy
       << "\" r=\"3\" fill=\"" << colors[static_cast<std::size_t>(b) % 6] << "\" fill-opacity=\"0.7\"/>\n";
  }
  for (int b = 0; b < groups.bucket_count; ++b) {
    const char* name = group_name(b, groups.bucket_count);
    os << "<text x=\"" << pad << "\" y=\"" << pad + 14.0 * b << "\" font-size=\"12\" fill=\""
       << colors[static_cast<std::size_t>(b) % 6] << "\">" << (name ? std::string(name) : "bucket " + std::to_string(b))
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_embedding_dump(const std::filesystem::path& path, const Tensor& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  os << w.rows() << ' ' << w.cols() << '\n';
  os << std::setprecision(17);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) os << (c ? " " : "") << w.at(r, c);
    os << '\n';
  }
  if (!os) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

Tensor read_embedding_dump(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::size_t V = 0, d = 0;
  if (!(is >> V >> d)) throw Error(ErrorCode::IoError, "bad embedding header in " + path.string());
  Tensor w({V, d});
  for (auto& x : w.storage()) {
    if (!(is >> x)) throw Error(ErrorCode::IoError, "truncated embedding dump " + path.string());
  }
  return w;
}

}  // namespace fcl::geometry
