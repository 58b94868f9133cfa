#pragma once

#include <optional>
#include <vector>

#include "permalign/align.hpp"
#include "permalign/data.hpp"
#include "permalign/model.hpp"
#include "permalign/train.hpp"

namespace permalign {

struct EvalResult {
  double mean_cross_entropy = 0.0;
  double error_rate = 0.0;
  int n_examples = 0;
};

// Mean softmax cross-entropy and 0-1 error over the split. Argmax ties
// resolve to the lowest class index.
EvalResult evaluate(const NetworkParams& params, const Dataset& data);

struct SplitCurve {
  std::vector<double> loss;
  std::vector<double> error;
  double loss_a = 0.0, loss_b = 0.0;    // endpoint losses l(A), l(B)
  double error_a = 0.0, error_b = 0.0;
  double barrier_loss = 0.0;
  double barrier_error = 0.0;
};

struct BarrierCurve {
  std::vector<double> alphas;  // increasing, includes 0 and 1; alpha weights A
  SplitCurve train;
  std::optional<SplitCurve> test;
};

// Loss/error along the linear path alpha*a + (1-alpha)*b on an
// equally-spaced inclusive alpha grid. The barrier is the max over the
// grid of value(alpha) - (alpha*l(A) + (1-alpha)*l(B)); endpoints
// contribute exactly zero. Grid points are evaluated concurrently into
// pre-assigned slots, so thread count never changes the numbers.
BarrierCurve barrier_curve(const NetworkParams& a, const NetworkParams& b,
                           const Dataset& train, const Dataset* test = nullptr,
                           int n_alpha = 25, int threads = 0);

// True iff the test-split error barrier is at or below the threshold.
bool is_linearly_connected(const NetworkParams& a, const NetworkParams& b,
                           const Dataset& train, const Dataset& test,
                           double threshold, int n_alpha = 25);

// Bootstrap standard deviation of the error-rate estimator; the default
// connectivity threshold is twice this value.
double bootstrap_error_std(const NetworkParams& params, const Dataset& data,
                           int n_boot, std::uint64_t seed);

enum class Matcher { weight, activation };

struct TripletResult {
  BarrierCurve direct;    // barrier(A, P_{A->B}[B])
  BarrierCurve indirect;  // barrier(P_{A->C}[A], P_{B->C}[B])
  double fp_fraction = 0.0;  // invert(P_{A->C}) o P_{B->C} vs direct match
};

// Aligns A and B to a reference C and compares the resulting indirect
// barrier against direct alignment.
TripletResult triplet_test(const NetworkParams& a, const NetworkParams& b,
                           const NetworkParams& c, Matcher matcher,
                           const Dataset& train, const Dataset& test,
                           int n_alpha = 25, std::uint64_t match_seed = 0);

struct InstabilityResult {
  BarrierCurve child_barrier;  // between the two children of parent A
  std::optional<BarrierCurve> cross_barrier;  // A-child vs P_end[B-child]
};

// Trains children from the parent state at its checkpointed epoch with
// fresh minibatch orders; optionally also spawns a child of parent B and
// reports the barrier to it under a fixed parent-level permutation.
InstabilityResult instability(const TrainConfig& config,
                              const Checkpoint& parent_a_at_epoch,
                              const std::pair<std::uint64_t, std::uint64_t>& child_seeds,
                              const Dataset& train, const Dataset& test,
                              const Checkpoint* parent_b_at_epoch = nullptr,
                              const Permutation* p_end = nullptr,
                              const PermutationSpec* spec = nullptr,
                              int n_alpha = 25);

struct LandscapeProjection {
  Matrix losses;                 // ny x nx grid of losses
  std::vector<double> grid_x;    // in-plane x coordinate per column
  std::vector<double> grid_y;    // in-plane y coordinate per row
  double p1_x = 0.0;             // projection of p1 is (p1_x, 0)
  double p2_x = 0.0, p2_y = 0.0;
  std::vector<std::pair<double, double>> trajectory;
};

// Loss over the affine plane through three parameter points, with an
// orthonormal in-plane basis (u = p1-p0 normalized, v = Gram-Schmidt of
// p2-p0). The grid covers the triangle's bounding box plus a relative
// margin. Throws DegeneratePlaneError for collinear/coincident anchors.
LandscapeProjection landscape_projection(
    const NetworkParams& p0, const NetworkParams& p1, const NetworkParams& p2,
    int nx, int ny, double margin, const Dataset& data,
    const std::vector<const NetworkParams*>& trajectory = {}, int threads = 0);

}  // namespace permalign
