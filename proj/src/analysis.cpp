#include "lora/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "lora/errors.hpp"
#include "lora/svd.hpp"

namespace lora {
namespace {

void check_rank(const char* what, std::size_t i, std::size_t available) {
  if (i == 0 || i > available) {
    throw DimensionError(std::string(what) + ": requested " + std::to_string(i) +
                         " directions, " + std::to_string(available) + " available");
  }
}

Matrix random_orthonormal(std::size_t rows, std::size_t r, std::mt19937_64& rng) {
  return leading_columns(svd(Matrix::gaussian(rows, r, 1.0, rng)).U, r);
}

std::string module_label(const LoraModule& m) {
  return "blocks." + std::to_string(m.target.layer) + "." + weight_name(m.target.weight);
}

}  // namespace

Matrix right_singular_basis(const Matrix& a) { return svd(a).V; }

double basis_similarity(const Matrix& U1, const Matrix& U2, std::size_t i, std::size_t j) {
  if (U1.rows() != U2.rows()) {
    throw DimensionError("subspace similarity: bases live in " + std::to_string(U1.rows()) +
                         " and " + std::to_string(U2.rows()) + " dimensions");
  }
  check_rank("subspace similarity (left)", i, U1.cols());
  check_rank("subspace similarity (right)", j, U2.cols());
  const Matrix g = matmul_tn(leading_columns(U1, i), leading_columns(U2, j));
  const double f = frobenius_norm(g);
  return std::clamp(f * f / static_cast<double>(std::min(i, j)), 0.0, 1.0);
}

double subspace_similarity(const Matrix& A1, const Matrix& A2, std::size_t i, std::size_t j) {
  return basis_similarity(right_singular_basis(A1), right_singular_basis(A2), i, j);
}

SubspaceReport basis_report(const Matrix& U1, const Matrix& U2, std::size_t i_max,
                            std::size_t j_max, std::string left_label, std::string right_label) {
  check_rank("subspace report (left)", i_max, U1.cols());
  check_rank("subspace report (right)", j_max, U2.cols());
  SubspaceReport r{std::move(left_label), std::move(right_label), Matrix(i_max, j_max), i_max,
                   j_max};
  for (std::size_t i = 1; i <= i_max; ++i)
    for (std::size_t j = 1; j <= j_max; ++j) r.grid(i - 1, j - 1) = basis_similarity(U1, U2, i, j);
  return r;
}

SubspaceReport subspace_report(const Matrix& A1, const Matrix& A2, std::size_t i_max,
                               std::size_t j_max, std::string left_label, std::string right_label) {
  return basis_report(right_singular_basis(A1), right_singular_basis(A2), i_max, j_max,
                      std::move(left_label), std::move(right_label));
}

ProjectionMetric projection_metric_check(const Matrix& A1, const Matrix& A2, std::size_t i,
                                         std::size_t j) {
  const Matrix U1 = right_singular_basis(A1);
  const Matrix U2 = right_singular_basis(A2);
  const double phi = basis_similarity(U1, U2, i, j);
  const Matrix g = matmul_tn(leading_columns(U1, i), leading_columns(U2, j));
  const std::vector<double> s = svd(g).S;
  const double p = static_cast<double>(std::min(i, j));
  double sum_sq = 0.0;
  for (double v : s) sum_sq += v * v;
  ProjectionMetric out;
  out.distance = std::sqrt(std::max(0.0, p - sum_sq));
  out.phi = sum_sq / p;
  const double via_distance = (p - out.distance * out.distance) / p;
  if (std::abs(via_distance - phi) > 1e-10 || std::abs(out.phi - phi) > 1e-10) {
    throw NumericError("projection metric: phi = " + std::to_string(phi) +
                       " but (p - d^2) / p = " + std::to_string(via_distance));
  }
  return out;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<SeedPairEntry> seed_pair_study(const Attachments& run_a, const Attachments& run_b,
                                           std::size_t baseline_draws, std::uint64_t seed) {
  if (run_a.lora.size() != run_b.lora.size() || run_a.lora.empty()) {
    throw ContractError("seed pair study: runs carry different (or no) LoRA modules");
  }
  if (baseline_draws == 0) throw ContractError("seed pair study: need at least one baseline draw");
  std::mt19937_64 rng(seed);
  std::vector<SeedPairEntry> out;
  for (const LoraModule& ma : run_a.lora) {
    const LoraModule* mb = run_b.find_lora(ma.target.layer, ma.target.weight);
    if (mb == nullptr || mb->rank != ma.rank || mb->A.cols() != ma.A.cols()) {
      throw ContractError("seed pair study: rank or target mismatch at " + module_label(ma));
    }
    SeedPairEntry e;
    e.target = module_label(ma);
    e.trained = subspace_report(ma.A, mb->A, ma.rank, ma.rank, "seed_a", "seed_b");
    e.top1 = e.trained.grid(0, 0);
    e.baseline_mean = SubspaceReport{"random_a", "random_b", Matrix(ma.rank, ma.rank), ma.rank,
                                     ma.rank};
    for (std::size_t draw = 0; draw < baseline_draws; ++draw) {
      const Matrix g1 = Matrix::gaussian(ma.rank, ma.A.cols(), 1.0, rng);
      const Matrix g2 = Matrix::gaussian(ma.rank, ma.A.cols(), 1.0, rng);
      const SubspaceReport r = subspace_report(g1, g2, ma.rank, ma.rank);
      e.baseline_mean.grid += r.grid;
      e.baseline_top1.push_back(r.grid(0, 0));
    }
    e.baseline_mean.grid *= 1.0 / static_cast<double>(baseline_draws);
    e.baseline_p99 = quantile(e.baseline_top1, 0.99);
    out.push_back(std::move(e));
  }
  return out;
}

double projected_norm(const Matrix& M, const Matrix& U, const Matrix& V) {
  return frobenius_norm(matmul(matmul_tn(U, M), V));
}

ProjectionReport projection_study(const Matrix& W, const Matrix& dW, std::size_t r,
                                  std::uint64_t seed) {
  if (W.rows() != dW.rows() || W.cols() != dW.cols()) {
    throw DimensionError("projection study: W is " + W.shape_string() + " but dW is " +
                         dW.shape_string());
  }
  check_rank("projection study", r, std::min(W.rows(), W.cols()));
  const SvdResult fd = svd(dW);
  const SvdResult fw = svd(W);
  std::mt19937_64 rng(seed);
  ProjectionReport rep;
  rep.rank = r;
  rep.norm_W = frobenius_norm(W);
  rep.norm_dW = frobenius_norm(dW);
  rep.proj_delta = projected_norm(W, leading_columns(fd.U, r), leading_columns(fd.V, r));
  rep.proj_weight = projected_norm(W, leading_columns(fw.U, r), leading_columns(fw.V, r));
  const Matrix ru = random_orthonormal(W.rows(), r, rng);
  const Matrix rv = random_orthonormal(W.cols(), r, rng);
  rep.proj_random = projected_norm(W, ru, rv);
  rep.amplification = rep.proj_delta > 0.0 ? rep.norm_dW / rep.proj_delta
                                           : std::numeric_limits<double>::infinity();
  return rep;
}

SubspaceReport weight_delta_report(const Matrix& W, const Matrix& dW, std::size_t i_max,
                                   std::size_t j_max) {
  return basis_report(svd(dW).U, svd(W).U, i_max, j_max, "delta", "weight");
}

std::string target_letters(const std::vector<AttnWeight>& targets) {
  std::string s;
  for (AttnWeight w : targets) s += weight_name(w)[2];
  return s;
}

std::vector<SweepCell> rank_sweep(const TransformerModel& base, const TaskDataset& train_set,
                                  const TaskDataset& eval_set, const RankSweepOptions& options) {
  struct Job {
    std::size_t rank;
    std::vector<AttnWeight> targets;
  };
  std::vector<Job> jobs;
  for (const auto& t : options.target_variants)
    for (std::size_t r : options.ranks) jobs.push_back({r, t});
  std::vector<SweepCell> cells(jobs.size());

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      try {
        TransformerModel model = base;
        const AdaptationStrategy s = AdaptationStrategy::low_rank(
            jobs[k].rank, jobs[k].targets, options.alpha);
        AdaptResult res = adapt(model, train_set, s, options.hyper);
        const EvalResult ev = evaluate(model, eval_set, &res.attachments);
        cells[k] = {jobs[k].rank, s.lora->targets, res.trainable_params,
                    res.metrics.empty() ? 0.0 : res.metrics.back().loss, ev.loss, ev.accuracy};
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(options.workers, 1, std::max<std::size_t>(1, jobs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return cells;
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
  std::ostringstream os;
  os.precision(10);
  os << "targets,rank,trainable_params,train_loss,eval_loss,eval_accuracy\n";
  for (const SweepCell& c : cells)
    os << target_letters(c.targets) << ',' << c.rank << ',' << c.trainable_params << ','
       << c.train_loss << ',' << c.eval_loss << ',' << c.eval_accuracy << '\n';
  return os.str();
}

std::string sweep_grid_csv(const std::vector<SweepCell>& cells) {
  std::vector<std::size_t> ranks;
  std::vector<std::string> rows;
  for (const SweepCell& c : cells) {
    if (std::find(ranks.begin(), ranks.end(), c.rank) == ranks.end()) ranks.push_back(c.rank);
    const std::string t = target_letters(c.targets);
    if (std::find(rows.begin(), rows.end(), t) == rows.end()) rows.push_back(t);
  }
  std::ostringstream os;
  os.precision(6);
  os << "targets";
  for (std::size_t r : ranks) os << ",r=" << r;
  os << '\n';
  for (const std::string& t : rows) {
    os << t;
    for (std::size_t r : ranks) {
      os << ',';
      for (const SweepCell& c : cells)
        if (c.rank == r && target_letters(c.targets) == t) os << c.eval_loss;
    }
    os << '\n';
  }
  return os.str();
}

std::string grid_csv(const Matrix& grid) {
  std::ostringstream os;
  os.precision(10);
  os << "i\\j";
  for (std::size_t j = 0; j < grid.cols(); ++j) os << ',' << j + 1;
  os << '\n';
  for (std::size_t i = 0; i < grid.rows(); ++i) {
    os << i + 1;
    for (std::size_t j = 0; j < grid.cols(); ++j) os << ',' << grid(i, j);
    os << '\n';
  }
  return os.str();
}

std::string grid_pgm(const Matrix& grid) {
  std::string out = "P5\n" + std::to_string(grid.cols()) + " " + std::to_string(grid.rows()) +
                    "\n255\n";
  for (double v : grid.values()) {
    const double c = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  return out;
}

std::string projection_csv(const std::vector<ProjectionReport>& reports) {
  std::ostringstream os;
  os.precision(10);
  os << "quantity";
  for (const ProjectionReport& r : reports) os << ",r=" << r.rank;
  os << '\n';
  auto row = [&](const char* name, auto field) {
    os << name;
    for (const ProjectionReport& r : reports) os << ',' << field(r);
    os << '\n';
  };
  row("proj_delta", [](const ProjectionReport& r) { return r.proj_delta; });
  row("proj_weight", [](const ProjectionReport& r) { return r.proj_weight; });
  row("proj_random", [](const ProjectionReport& r) { return r.proj_random; });
  row("norm_W", [](const ProjectionReport& r) { return r.norm_W; });
  row("norm_dW", [](const ProjectionReport& r) { return r.norm_dW; });
  row("amplification", [](const ProjectionReport& r) { return r.amplification; });
  return os.str();
}

}  // namespace lora
