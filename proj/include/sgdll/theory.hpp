// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sgdll/models.hpp"

namespace sgdll {

enum class StudentMode { well_trained, random, bayes };
enum class MeanMode { gaussian, calibrated };
enum class LayerKind { output, intermediate };

std::string_view to_string(StudentMode m);
std::string_view to_string(MeanMode m);
std::string_view to_string(LayerKind k);
StudentMode parse_student_mode(std::string_view s);
MeanMode parse_mean_mode(std::string_view s);

struct WorldSpec {
  int vocab = 64;
  int dim = 8;
  double zipf_s = 1.2;
  double sigma = 1.0;
  double mean_scale = 1.0;
  std::uint64_t seed = 0;
  MeanMode means = MeanMode::gaussian;
  StudentMode student = StudentMode::well_trained;
  int hidden = 0;  // > 0 adds a one-hidden-layer student for intermediate-layer checks
  Activation activation = Activation::gelu;
  int fit_samples = 100000;
  int fit_steps = 100;
  double random_scale = 0.02;

  void validate() const;
};

/// Gaussian class-conditional world: y ~ q, h | y=j ~ N(mu_j, sigma^2 I).
///
/// With calibrated means, ||mu_j||^2 = 2 sigma^2 (log(q_j / q_min) + mean_scale^2 d / (2 sigma^2)),
/// which makes the Bayes posterior exactly softmax(mu h / sigma^2), a bias-free
/// linear softmax. The well-trained student starts there (or at mu / sigma^2 for
/// gaussian means) and runs fit_steps of full-batch gradient descent on the
/// cross-entropy of fit_samples world draws with step 1.8 / E||h||^2.
class SyntheticWorld {
 public:
  static SyntheticWorld make(const WorldSpec& spec);
  /// Explicit world for tests; `student` is the V x d output-layer matrix.
  static SyntheticWorld custom(std::vector<double> q, Tensor2d means, double sigma, Tensor2d student);

  int vocab() const { return static_cast<int>(q_.size()); }
  int dim() const { return static_cast<int>(means_.cols()); }
  const WorldSpec& spec() const { return spec_; }
  const std::vector<double>& q() const { return q_; }
  const Tensor2d& means() const { return means_; }
  double sigma() const { return sigma_; }
  const Tensor2d& student() const { return student_; }

  bool has_mlp() const { return w1_.size() > 0; }
  const Tensor2d& w1() const { return w1_; }
  const Tensor2d& w2() const { return w2_; }
  void set_mlp(Tensor2d w1, Tensor2d w2, Activation a);

  /// n i.i.d. draws; rows of h and labels y.
  void sample(std::size_t n, Rng& rng, Tensor2d& h, std::vector<int>& y) const;
  /// n draws of h | y = j.
  Tensor2d sample_class(int j, std::size_t n, Rng& rng) const;

  /// Bayes posterior q_j(h), one row per sample.
  Tensor2d posterior(const Tensor2d& h) const;
  /// Student softmax p_j(h) for the requested layer's network.
  Tensor2d probs(const Tensor2d& h, LayerKind layer) const;
  /// ||U_j(h)||^2 per sample and class: ||h||^2 (output) or Gamma_j ||h||^2.
  Tensor2d u_sq_norms(const Tensor2d& h, LayerKind layer) const;
  /// Gamma_j = ||D_phi J_j^T||^2 for one sample of the intermediate layer.
  Eigen::VectorXd gamma(const Eigen::RowVectorXd& h) const;
  /// Intermediate-layer matrix M_j = D_phi J_j^T h^T for one sample.
  Tensor2d m_matrix(const Eigen::RowVectorXd& h, int j) const;

 private:
  WorldSpec spec_;
  std::vector<double> q_;
  std::vector<double> log_q_;
  Tensor2d means_;
  Eigen::VectorXd mean_sq_;
  double sigma_ = 1.0;
  Tensor2d student_;
  Tensor2d w1_, w2_;
  Activation act_ = Activation::gelu;
  Categorical label_dist_{std::vector<double>{1.0}};
};

struct Estimate {
  double mean = 0.0;
  double se = 0.0;
};

struct LhsEstimate {
  Estimate value;
  std::size_t batches = 0;
  // samplewise identities: ||G||^2 = sum_j ||G_j||^2 (output) or
  // ||sum_j G_j||^2 <= V sum_j ||G_j||^2 (intermediate)
  std::size_t identity_violations = 0;
  double max_identity_error = 0.0;
  // rank-1 identity ||M_j||^2 = Gamma_j ||h||^2 (intermediate only)
  double max_rank1_error = 0.0;
};

/// Mean and standard error of ||G||_F^2 over n_mc independent batches of size B.
LhsEstimate estimate_lhs(const SyntheticWorld& w, int B, std::size_t n_mc, LayerKind layer, Rng& rng);

enum class PartitionMode { quantile, threshold };

struct PartitionSpec {
  std::vector<int> head;
  std::vector<int> tail;
  double c_q = 0.0;  // max tail frequency, 0 for an empty tail
};

/// quantile: the floor(param * V) most frequent tokens form the head.
/// threshold: tail = {j : q_j < param}.
PartitionSpec partition_tokens(std::span<const double> freqs, PartitionMode mode, double param);

struct TermSampling {
  std::size_t samples = 50000;      // single-sample draws for the expectation terms
  std::size_t class_samples = 4000;  // conditional draws per tail token for s_j^2
};

struct BoundReport {
  Estimate lhs;
  Estimate term_head_bias;
  Estimate term_head_cov;
  Estimate term_tail_hits;
  Estimate term_tail_background;
  double kappa = 1.0;
  double rhs = 0.0;
  double combined_se = 0.0;
  double margin = 0.0;
  bool pass = false;
  std::size_t n_mc = 0;
  int B = 0;
  LayerKind layer = LayerKind::output;
  LhsEstimate lhs_detail;
};

/// The four right-hand-side terms (lhs left empty).
BoundReport bound_terms(const SyntheticWorld& w, const PartitionSpec& part, int B, LayerKind layer, Rng& rng,
                        const TermSampling& ts = {});

/// lhs <= kappa * (sum of terms) + 3 combined standard errors. `term_scale`
/// multiplies every term before the comparison (1 except in checker self-tests).
BoundReport verify_theorem1(const SyntheticWorld& w, const PartitionSpec& part, int B, std::size_t n_mc,
                            LayerKind layer, Rng& rng, const TermSampling& ts = {}, double term_scale = 1.0);

struct LemmaCheck {
  std::string name;
  double measured = 0.0;
  double expected = 0.0;
  double se = 0.0;
  bool pass = false;
};

struct LemmaReport {
  int token = 0;
  double p = 0.0;
  double qh = 0.0;
  double h_sq = 0.0;
  std::vector<LemmaCheck> checks;  // mean residual, second moment, covariance trace
  bool pass = false;
};

/// Label resampling y ~ Categorical(q(h)) at a fixed h; checks within 4 se
/// (with a 1e-12 floor on the standard error).
LemmaReport check_lemmas_at(const Eigen::VectorXd& p, const Eigen::VectorXd& qh, const Eigen::VectorXd& h, int j,
                            std::size_t n_mc, Rng& rng);
/// Draws h from the world, then check_lemmas_at with the output student.
LemmaReport verify_lemmas(const SyntheticWorld& w, int j, std::size_t n_mc, Rng& rng);

struct PropReport {
  int token = 0;
  bool head = true;
  Estimate lhs;     // E||g_j||^2
  Estimate bound;
  double margin = 0.0;
  bool pass = false;
  // largest relative gap between background minus hits and the direct g_j
  double split_error = 0.0;
};

/// Head: (1+1/B) eps_j^2 + (1/B) E[q_j(1-q_j)||h||^2].
/// Tail: (2 q_j / B) s_j^2 + 2 q_j^2 ||m_j||^2 + 2 E[p_j^2 ||h||^2].
PropReport verify_props(const SyntheticWorld& w, int j, bool head, int B, std::size_t n_mc, Rng& rng,
                        const TermSampling& ts = {});

/// E||g_j||^2 for every class from n_mc batches (output layer).
std::vector<Estimate> token_grad_sq(const SyntheticWorld& w, int B, std::size_t n_mc, Rng& rng);

/// Constants entering the ratio bound, measured once per world and token pair.
struct Theorem2Constants {
  double qi = 0.0, qj = 0.0;
  double si_sq = 0.0, sj_sq = 0.0;
  double mj_sq = 0.0;
  double h_sq = 0.0;      // E||h||^2
  double max_p_sq = 0.0;  // max_{k in {i,j}} E[p_k^2 ||h||^2]
};

struct Theorem2Report {
  int i = 0, j = 0, B = 0;
  double c = 0.0;
  bool vacuous = false;  // c > B / 10
  Estimate gi, gj;       // E||g_i||^2, E||g_j||^2
  double lower_i = 0.0, lower_j = 0.0;
  Estimate ratio;        // E||g_i||^2 / E||g_j||^2
  double ratio_bound = 0.0;
  bool lower_pass = false;
  bool ratio_pass = false;
  bool pass = false;
  Theorem2Constants constants;
};

Theorem2Constants theorem2_constants(const SyntheticWorld& w, int i, int j, Rng& rng, const TermSampling& ts = {});
/// c = B * sqrt(max_p_sq / h_sq).
double theorem2_c(const Theorem2Constants& k, int B);
double theorem2_lower(double q, double s_sq, double c, double h_sq, int B);
double theorem2_ratio_bound(const Theorem2Constants& k, double c, int B);
/// Ratio bound over an increasing grid with c held at its value for the largest
/// batch, the smallest c for which the assumption holds at every grid point.
std::vector<double> theorem2_ratio_curve(const Theorem2Constants& k, const std::vector<int>& B_grid);

Theorem2Report verify_theorem2(const SyntheticWorld& w, int i, int j, int B, std::size_t n_mc, Rng& rng,
                               const TermSampling& ts = {});

struct SlopeReport {
  std::vector<int> B;
  std::vector<Estimate> values;
  double slope = 0.0;
};

/// Log-log slope of E||G||^2 against B.
SlopeReport grad_norm_scaling(const SyntheticWorld& w, const std::vector<int>& B_grid, std::size_t n_mc, Rng& rng);
/// Log-log slope of E[||W||_F / ||G||_F] against B. Throws ContractError when
/// ||W||_F is below w_norm_floor.
SlopeReport verify_wsg_corollary(const SyntheticWorld& w, double w_norm_floor, const std::vector<int>& B_grid,
                                 std::size_t n_mc, Rng& rng);

/// Verification campaign settings ([theory] section of a run config).
struct TheoryCampaign {
  std::uint64_t seed = 1;
  int output_worlds = 100;
  int intermediate_worlds = 20;
  std::size_t n_mc = 2000;
  std::size_t term_samples = 50000;
  std::size_t class_samples = 4000;
  int lemma_cases = 10;
  std::size_t lemma_n_mc = 100000;
  int theorem2_cases = 20;
  std::size_t theorem2_n_mc = 4000;
  std::vector<int> scaling_B{8, 32, 128, 512};
  std::size_t scaling_n_mc = 2000;
  int fit_samples = 100000;
  int fit_steps = 100;
  bool fault_injection = false;  // multiplies bound terms by 0.1 (checker self-test)

  void validate() const;
};

/// One line of theory_report.csv.
struct TheoryRow {
  std::string check;
  std::uint64_t world_seed = 0;
  int V = 0, d = 0, B = 0;
  std::string layer;
  double lhs = 0.0, lhs_se = 0.0;
  double head_bias = 0.0, head_cov = 0.0, tail_hits = 0.0, tail_background = 0.0;
  double kappa = 0.0, rhs = 0.0, margin = 0.0;
  std::string status;  // pass, fail, vacuous
  std::string note;
};

struct CampaignResult {
  std::vector<TheoryRow> rows;
  std::size_t failures = 0;  // non-vacuous failures
  std::size_t output_pass = 0, output_total = 0;
  std::size_t intermediate_pass = 0, intermediate_total = 0;
  std::size_t identity_violations = 0;
  std::size_t lemma_pass = 0, lemma_total = 0;
  std::size_t theorem2_pass = 0, theorem2_total = 0, theorem2_vacuous = 0;
  std::size_t monotone_pass = 0, monotone_total = 0;
  double lhs_slope = 0.0, wsg_slope = 0.0;
  bool scaling_pass = false;
  bool all_pass() const;
};

/// Runs every verifier. `progress` (optional) receives each row as it is produced.
CampaignResult run_theory_campaign(const TheoryCampaign& c,
                                   const std::function<void(const TheoryRow&)>& progress = nullptr);

void write_theory_csv(const std::string& path, const std::vector<TheoryRow>& rows);

}  // namespace sgdll
