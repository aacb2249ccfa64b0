#pragma once

#include <optional>
#include <string>
#include <vector>

#include "scmil/core.hpp"
#include "scmil/sparse_coding.hpp"

namespace scmil {

// ---------------------------------------------------------------------------
// The MIL pipeline: instance embedding, per-instance sparse coding, a
// permutation-invariant pooling over the codes, and the bag-level classifier.
// ---------------------------------------------------------------------------

enum class MilVariant { abmil, abmil_gated, max_pool, mean_pool };

std::string to_string(MilVariant v);
MilVariant variant_from_string(const std::string& s);

/// One MIL unit: a variable-length set of instance feature vectors plus the
/// binary bag label. Positive iff at least one (hidden) instance is positive.
struct Bag {
  std::vector<Vector> instances;
  int label = 0;
  std::string id;
};

struct AffineParams {
  Matrix w;
  Vector b;
};

/// ABMIL scores: plain e_i = w^T tanh(V h_i); gated additionally multiplies a
/// sigmoid gate, e_i = w^T (tanh(V h_i) .* sigmoid(U h_i)). u is empty unless
/// the variant is gated.
struct AttentionParams {
  Matrix v;  // h_att x dim
  Matrix u;  // h_att x dim (gated only, otherwise 0 x 0)
  Vector w;  // h_att
};

struct MilModelConfig {
  Index d_raw = 64;
  Index embed_dim = 128;   // p
  Index atoms = 256;       // m
  int layers = 5;          // L
  Index att_hidden = 128;
  MilVariant variant = MilVariant::abmil_gated;
  bool sc_enabled = true;
};

/// Embedding layer, optional SC module, pooling, classifier head, plus the
/// frozen per-dimension feature standardization fitted from training data
/// (identity until fit() fills it in).
struct MilModel {
  AffineParams embed;                 // p x d_raw, ReLU
  std::optional<ScModuleParams> sc;
  AttentionParams pooling;            // empty matrices for max/mean variants
  AffineParams head;                  // 1 x q followed by sigmoid
  MilVariant variant = MilVariant::abmil_gated;
  Vector feat_mean;   // d_raw
  Vector feat_scale;  // d_raw, multiplicative

  Index d_raw() const { return embed.w.cols(); }
  Index embed_dim() const { return embed.w.rows(); }
  Index pooled_dim() const { return sc.has_value() ? sc->num_atoms() : embed_dim(); }
  bool has_attention() const {
    return variant == MilVariant::abmil || variant == MilVariant::abmil_gated;
  }
};

struct InstanceTrace {
  Vector x_std;      // standardized raw features
  Vector pre_embed;  // W x + b, before ReLU
  Vector h;          // embedding, after ReLU
  ListaCache sc;     // filled only when the model has an SC module
};

/// Everything forward() computed, sufficient for backward().
struct ForwardTrace {
  std::vector<InstanceTrace> instances;
  std::vector<Vector> tanh_vh;       // per instance, attention variants
  std::vector<Vector> sig_uh;        // per instance, gated only
  Vector scores;                     // raw attention scores e (empty for max/mean)
  Vector attention;                  // softmax(e); empty for max_pool
  std::vector<Index> argmax;         // per pooled coordinate, max_pool only
  Vector z;                          // pooled vector
  double logit = 0.0;
  double yhat = 0.5;
  double kink_margin = 0.0;  // min margin over soft-threshold/ReLU/max-pool ties
  double sparsity = 0.0;     // mean zero fraction of the codes (SC models)
};

struct MilGrads {
  AffineParams embed;
  std::optional<ScGrads> sc;
  AttentionParams pooling;
  AffineParams head;
};

inline constexpr double kProbClamp = 1e-7;

/// Binary cross-entropy with yhat clamped to [kProbClamp, 1 - kProbClamp].
double bce_loss(double yhat, int label);

Vector max_pool(const std::vector<Vector>& h);
Vector mean_pool(const std::vector<Vector>& h);

/// Returns (z, a): softmax-normalized attention weights a over the instances
/// and the pooled vector z = sum_i a_i h_i. Softmax subtracts the max score.
std::pair<Vector, Vector> attention_pool(const AttentionParams& params,
                                         const std::vector<Vector>& h, MilVariant variant);

/// ReLU(W x_raw + b) on the standardized features.
Vector embed_instance(const MilModel& model, const Vector& x_raw);

ForwardTrace forward(const MilModel& model, const Bag& bag);

/// Gradients of the clamped binary cross-entropy at (trace, label) w.r.t.
/// every model parameter, through attention and through every instance's
/// unrolled LISTA pass.
MilGrads backward(const MilModel& model, const ForwardTrace& trace, int label);

MilModel init_mil_model(const MilModelConfig& cfg, std::uint64_t seed);
MilGrads zero_grads(const MilModel& model);

}  // namespace scmil
