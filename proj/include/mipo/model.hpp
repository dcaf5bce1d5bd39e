#pragma once

// The MIPO network.
//
//   visit codes ──► code stream (W rows) ─┐
//                  node stream (G rows) ──┴─► V-Encoder (N integrator layers)
//                                              │ code outputs      │ node outputs
//                                              ▼                   ▼
//                                      attention pooling     disease-typing head
//                                              │
//                          visit vectors ──► P-Encoder (M layers, causal)
//                                              │
//                                              ▼
//                                      next-visit head

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mipo/autodiff.hpp"
#include "mipo/ehrdata.hpp"
#include "mipo/ontology.hpp"

namespace mipo::model {

enum class Activation { kRelu, kTanh, kSigmoid };
enum class NextVisitHead { kSoftmax, kSigmoid };

const char* to_string(Activation a);
const char* to_string(NextVisitHead h);
Activation parse_activation(const std::string& s);
NextVisitHead parse_head(const std::string& s);

struct ModelConfig {
    std::size_t d = 32;
    std::size_t heads = 4;
    std::size_t v_layers = 1;  // N
    std::size_t p_layers = 1;  // M
    std::size_t categories = 18;  // m
    std::size_t labels = 0;       // |C'|
    std::size_t num_codes = 0;    // |C|
    std::size_t num_nodes = 0;    // |C| + |N|
    std::size_t attention_hidden = 0;  // ontology attention width; 0 means d
    double dropout = 0.1;
    std::size_t max_visits = 20;
    std::size_t max_codes = 64;
    bool causal = true;
    Activation activation = Activation::kRelu;
    NextVisitHead head = NextVisitHead::kSoftmax;

    std::size_t ontology_hidden() const { return attention_hidden ? attention_hidden : d; }
    // Throws std::invalid_argument on an inconsistent configuration.
    void validate() const;
};

struct AttentionParams {
    ad::Tensor Wq, Wk, Wv, Wo;  // [d x d], applied as X * W
    ad::Tensor bq, bk, bv, bo;  // [d]
};

struct IntegratorParams {
    AttentionParams code_attention;
    AttentionParams node_attention;
    ad::Tensor fuse_code;  // W~_c
    ad::Tensor fuse_node;  // W~_g
    ad::Tensor fuse_bias;  // b~
    ad::Tensor out_code;   // W_c
    ad::Tensor out_code_bias;  // b_t
    ad::Tensor out_node;   // W_g
    ad::Tensor out_node_bias;  // b_e
};

struct PoolingParams {
    ad::Tensor W1;  // [d x d]
    ad::Tensor b1;  // [d]
    ad::Tensor w;   // [d]
    ad::Tensor b;   // [1]
};

struct EncoderLayerParams {
    AttentionParams attention;
    ad::Tensor ln1_gain, ln1_bias;
    ad::Tensor ffn_in, ffn_in_bias;    // [d x 4d], [4d]
    ad::Tensor ffn_out, ffn_out_bias;  // [4d x d], [d]
    ad::Tensor ln2_gain, ln2_bias;
};

struct ModelParameters {
    ad::Tensor code_embedding;  // W: [|C| x d]
    ontology::OntologyEmbedding ontology;
    std::vector<IntegratorParams> integrators;
    PoolingParams pooling;
    ad::Tensor visit_positions;  // [max_visits x d]
    std::vector<EncoderLayerParams> encoder;
    ad::Tensor next_weight;   // W_P: [|C'| x d]
    ad::Tensor next_bias;     // b_P
    ad::Tensor typing_weight; // W_V: [m x d]
    ad::Tensor typing_bias;   // b_V
};

using NamedTensor = std::pair<std::string, ad::Tensor>;

class MipoModel {
  public:
    MipoModel(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    ModelParameters& params() { return params_; }
    const ModelParameters& params() const { return params_; }

    // Every learnable array, in a fixed order with stable names. The tensors
    // share storage with the model.
    std::vector<NamedTensor> named_parameters() const;
    std::size_t parameter_count() const;

    // Deep copy with independent storage.
    MipoModel clone() const;
    void zero_grad();

  private:
    ModelConfig config_;
    ModelParameters params_;
};

// Dropout only runs when `train` is set.
struct RunContext {
    bool train = false;
    double dropout = 0.0;
    std::mt19937_64* rng = nullptr;

    ad::Tensor maybe_dropout(const ad::Tensor& x) const;
};

// (code stream, node stream) for one visit's code slots; a slot whose mask
// byte is 0 yields zero rows whatever its code value.
std::pair<ad::Tensor, ad::Tensor> embed_visit(std::span<const std::int64_t> codes, const ad::Mask& mask,
                                              const ad::Tensor& code_embedding, const ad::Tensor& G);

// Scaled dot-product multi-head self-attention without positional terms.
// Keys with mask 0 are excluded; rows with mask 0 (or with no admissible key)
// output zeros. With `causal`, row r only attends to keys <= r.
ad::Tensor multi_head_self_attention(const ad::Tensor& X, const AttentionParams& params, std::size_t heads,
                                     const ad::Mask& mask, bool causal = false, const RunContext& ctx = {});

ad::Tensor activate(const ad::Tensor& x, Activation a);

std::pair<ad::Tensor, ad::Tensor> integrator_layer(const ad::Tensor& code_stream, const ad::Tensor& node_stream,
                                                   const IntegratorParams& params, const ModelConfig& config,
                                                   const ad::Mask& mask, const RunContext& ctx = {});

std::pair<ad::Tensor, ad::Tensor> v_encoder(const ad::Tensor& code_stream, const ad::Tensor& node_stream,
                                            std::span<const IntegratorParams> layers, const ModelConfig& config,
                                            const ad::Mask& mask, const RunContext& ctx = {});

// Pooled visit vector [1 x d]. Throws std::invalid_argument if every position is masked.
ad::Tensor attention_pooling(const ad::Tensor& code_outputs, const PoolingParams& params, Activation activation,
                             const ad::Mask& mask);
// The pooling weights alone, [1 x n].
ad::Tensor pooling_weights(const ad::Tensor& code_outputs, const PoolingParams& params, Activation activation,
                           const ad::Mask& mask);

ad::Tensor p_encoder(const ad::Tensor& visit_vectors, const ad::Tensor& positions,
                     std::span<const EncoderLayerParams> layers, const ModelConfig& config, const ad::Mask& step_mask,
                     const RunContext& ctx = {});

// Softmax(W_P v + b_P) row-wise for v of shape [rows x d] (sigmoid with the
// ablation head).
ad::Tensor predict_next(const ad::Tensor& encoded, const ad::Tensor& weight, const ad::Tensor& bias,
                        NextVisitHead head = NextVisitHead::kSoftmax);
ad::Tensor predict_typing(const ad::Tensor& node_outputs, const ad::Tensor& weight, const ad::Tensor& bias);

struct ForwardOutput {
    std::vector<ad::Tensor> next_visit_probs;  // per patient [(T-1) x |C'|]
    std::vector<std::vector<ad::Tensor>> typing_probs;  // per patient, per step [n x m]; undefined when step invalid
    std::vector<ad::Tensor> visit_reprs;       // per patient [(T-1) x d] pooled visit vectors
    std::vector<ad::Tensor> encoded;           // per patient [(T-1) x d] P-Encoder outputs
};

enum class Mode { kTrain, kEval };

// One pass over a padded batch. `rng` drives dropout and is only used in
// train mode.
ForwardOutput forward(const ehr::Batch& batch, const MipoModel& model, const ontology::OntologyGraph& graph, Mode mode,
                      std::mt19937_64* rng = nullptr);

// Text checkpoint: version tag, config echo, then every named array with its
// shape and values in hexadecimal floating point (bit-exact round trip).
void save_checkpoint(std::ostream& out, const MipoModel& model);
void save_checkpoint(const std::string& path, const MipoModel& model);
MipoModel load_checkpoint(std::istream& in);
MipoModel load_checkpoint(const std::string& path);

}  // namespace mipo::model
