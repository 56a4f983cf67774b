#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "cfm/sliding_window.hpp"

namespace cfm {

// Bounded FIFO of recent hidden-state rows; the corpus for periodic
// k-means refreshes. Stores detached value copies only.
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(size_t capacity, int dim) : capacity_(capacity), dim_(dim) {}

  void push(const Matrix& rows);
  size_t size() const { return rows_.size(); }
  size_t capacity() const { return capacity_; }
  int dim() const { return dim_; }

  // oldest-to-newest snapshot
  Matrix snapshot() const;

  void assign_rows(const Matrix& rows);  // checkpoint restore

 private:
  size_t capacity_ = 0;
  int dim_ = 0;
  std::vector<std::vector<Real>> rows_;  // front = oldest
  size_t head_ = 0;                      // ring index of oldest row once full
  bool full_ = false;
};

void memory_push(MemoryBank& bank, const Matrix& rows);

// Cluster centroids in greedy nearest-neighbour tour order.
struct Centroids {
  Matrix vectors;  // p x d
  int64_t epoch_tag = 0;
};

struct ClusterRoute {
  std::vector<int> assignment;        // v, length T
  std::vector<int> permutation;       // u = stable argsort of v
  std::vector<int> inverse;           // inverse[u[i]] = i
  std::vector<std::vector<int>> groups;  // a_k = u[m*k : m*(k+1)), ragged tail
};

struct UpdateSchedule {
  uint64_t frequency = 1;  // iterations between refreshes; kNeverUpdate freezes
  int kmeans_iterations = 10;
  uint64_t seed = 0;
};

inline constexpr uint64_t kNeverUpdate = UINT64_MAX;

struct KMeansResult {
  Matrix centroids;                 // p x d
  std::vector<int> assignment;      // per input point
  std::vector<double> sse_trace;    // within-cluster SSE after each Lloyd iteration
};

// Lloyd's algorithm with greedy k-means++ initialization. Empty clusters
// are re-seeded to the point farthest from its assigned centroid.
KMeansResult kmeans(const Matrix& points, int p, int iters, uint64_t seed);

// Orders raw centroids into a greedy nearest-neighbour tour by cosine
// similarity, starting from centroid 0; ties break to the lowest raw index.
Centroids order_centroids_greedy(const Matrix& raw);

// v[i] = argmax_c cosine(row i, centroid c); ties to the lowest centroid
// index; zero-norm rows go to centroid 0.
std::vector<int> assign_clusters(const Matrix& rows, const Centroids& centroids);

// Stable argsort of v, uniform chunks of m indices (ragged tail).
ClusterRoute make_route(const std::vector<int>& v, int m);

// Splits flattened rows into per-group token groups following the route.
std::vector<TokenGroup> sort_and_chunk(const FlatState& flat, const ClusterRoute& route);

// Concatenates chunk outputs and applies the inverse permutation so row i
// of the result corresponds to flattened input row i.
Var scatter_back(const std::vector<TokenGroup>& chunk_outputs, const ClusterRoute& route);

// Seeded unit-norm random centroids for the pre-training state, in tour order.
Centroids initial_random_centroids(int p, int d, uint64_t seed);

struct CentroidUpdateResult {
  bool fired = false;    // schedule fired at this iteration
  bool updated = false;  // centroids actually replaced
  std::string warning;   // set when fired but previous centroids were kept
};

// Refreshes centroids in place when the schedule fires at this iteration
// (1-based). Keeps previous centroids and reports a warning condition when
// the bank holds fewer than p rows.
CentroidUpdateResult maybe_update_centroids(const MemoryBank& bank, const UpdateSchedule& schedule,
                                            uint64_t iteration, Centroids& centroids);

// Shared pipeline of the cluster-former and lsh layers: flatten, assign,
// stable-sort + chunk, per-chunk transformer, scatter back, unflatten.
// assign_fn maps flattened rows to group ids. A frozen route bypasses
// assignment (used to pin the non-differentiable routing during gradient
// checks); capture_route exports the route actually used.
LayerState routed_attention_layer(const LayerState& state, const std::function<std::vector<int>(const Matrix&)>& assign_fn,
                                  const TransformerLayerVars& w, const AttentionConfig& cfg, MaskSpec mask,
                                  DropoutCtx* dropout = nullptr, const ClusterRoute* frozen_route = nullptr,
                                  ClusterRoute* capture_route = nullptr);

LayerState cluster_former_layer(const LayerState& state, const Centroids& centroids, const TransformerLayerVars& w,
                                const AttentionConfig& cfg, MaskSpec mask, DropoutCtx* dropout = nullptr,
                                const ClusterRoute* frozen_route = nullptr, ClusterRoute* capture_route = nullptr);

}  // namespace cfm
