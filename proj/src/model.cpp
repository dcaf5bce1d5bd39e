#include "mipo/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace mipo::model {

using ad::Tensor;

const char* to_string(Activation a) {
    switch (a) {
        case Activation::kRelu: return "relu";
        case Activation::kTanh: return "tanh";
        case Activation::kSigmoid: return "sigmoid";
    }
    return "?";
}

const char* to_string(NextVisitHead h) { return h == NextVisitHead::kSoftmax ? "softmax" : "sigmoid"; }

Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::kRelu;
    if (s == "tanh") return Activation::kTanh;
    if (s == "sigmoid") return Activation::kSigmoid;
    throw std::invalid_argument("unknown activation '" + s + "' (expected relu, tanh or sigmoid)");
}

NextVisitHead parse_head(const std::string& s) {
    if (s == "softmax") return NextVisitHead::kSoftmax;
    if (s == "sigmoid") return NextVisitHead::kSigmoid;
    throw std::invalid_argument("unknown head '" + s + "' (expected softmax or sigmoid)");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
    if (d == 0 || heads == 0 || d % heads != 0) fail("d must be a positive multiple of heads");
    if (v_layers < 1) fail("need at least one V-Encoder layer");
    if (p_layers < 1) fail("need at least one P-Encoder layer");
    if (categories < 1) fail("need at least one typing category");
    if (labels < 1) fail("label space must be nonempty");
    if (num_codes < 1 || num_nodes <= num_codes) fail("ontology sizes are inconsistent");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
    if (max_visits < 1) fail("max_visits must be positive");
}

// --- initialization ---------------------------------------------------------

namespace {
Tensor weight(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double a = 1.0 / std::sqrt(static_cast<double>(in));
    return Tensor::uniform({in, out}, -a, a, rng, true);
}

Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }

AttentionParams init_attention(std::size_t d, std::mt19937_64& rng) {
    AttentionParams p;
    p.Wq = weight(d, d, rng);
    p.Wk = weight(d, d, rng);
    p.Wv = weight(d, d, rng);
    p.Wo = weight(d, d, rng);
    p.bq = zeros(d);
    p.bk = zeros(d);
    p.bv = zeros(d);
    p.bo = zeros(d);
    return p;
}

void name_attention(std::vector<NamedTensor>& out, const std::string& prefix, const AttentionParams& p) {
    out.emplace_back(prefix + ".Wq", p.Wq);
    out.emplace_back(prefix + ".Wk", p.Wk);
    out.emplace_back(prefix + ".Wv", p.Wv);
    out.emplace_back(prefix + ".Wo", p.Wo);
    out.emplace_back(prefix + ".bq", p.bq);
    out.emplace_back(prefix + ".bk", p.bk);
    out.emplace_back(prefix + ".bv", p.bv);
    out.emplace_back(prefix + ".bo", p.bo);
}
}  // namespace

MipoModel::MipoModel(ModelConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const std::size_t d = config_.d;
    std::mt19937_64 rng(seed);
    auto& p = params_;
    p.code_embedding = Tensor::uniform({config_.num_codes, d}, -0.1, 0.1, rng, true);

    const std::size_t hidden = config_.ontology_hidden();
    p.ontology.basic = Tensor::uniform({config_.num_nodes, d}, -0.1, 0.1, rng, true);
    p.ontology.attention.W = Tensor::uniform({hidden, 2 * d}, -1.0 / std::sqrt(2.0 * d), 1.0 / std::sqrt(2.0 * d), rng, true);
    p.ontology.attention.b = zeros(hidden);
    p.ontology.attention.w = Tensor::uniform({hidden}, -1.0 / std::sqrt(double(hidden)), 1.0 / std::sqrt(double(hidden)), rng, true);

    for (std::size_t l = 0; l < config_.v_layers; ++l) {
        IntegratorParams ip;
        ip.code_attention = init_attention(d, rng);
        ip.node_attention = init_attention(d, rng);
        ip.fuse_code = weight(d, d, rng);
        ip.fuse_node = weight(d, d, rng);
        ip.fuse_bias = zeros(d);
        ip.out_code = weight(d, d, rng);
        ip.out_code_bias = zeros(d);
        ip.out_node = weight(d, d, rng);
        ip.out_node_bias = zeros(d);
        p.integrators.push_back(std::move(ip));
    }

    p.pooling.W1 = weight(d, d, rng);
    p.pooling.b1 = zeros(d);
    p.pooling.w = Tensor::uniform({d}, -1.0 / std::sqrt(double(d)), 1.0 / std::sqrt(double(d)), rng, true);
    p.pooling.b = zeros(1);

    p.visit_positions = Tensor::uniform({config_.max_visits, d}, -0.1, 0.1, rng, true);
    for (std::size_t l = 0; l < config_.p_layers; ++l) {
        EncoderLayerParams e;
        e.attention = init_attention(d, rng);
        e.ln1_gain = ones(d);
        e.ln1_bias = zeros(d);
        e.ffn_in = weight(d, 4 * d, rng);
        e.ffn_in_bias = zeros(4 * d);
        e.ffn_out = weight(4 * d, d, rng);
        e.ffn_out_bias = zeros(d);
        e.ln2_gain = ones(d);
        e.ln2_bias = zeros(d);
        p.encoder.push_back(std::move(e));
    }

    const double a = 1.0 / std::sqrt(static_cast<double>(d));
    p.next_weight = Tensor::uniform({config_.labels, d}, -a, a, rng, true);
    p.next_bias = zeros(config_.labels);
    p.typing_weight = Tensor::uniform({config_.categories, d}, -a, a, rng, true);
    p.typing_bias = zeros(config_.categories);
}

std::vector<NamedTensor> MipoModel::named_parameters() const {
    std::vector<NamedTensor> out;
    const auto& p = params_;
    out.emplace_back("code_embedding", p.code_embedding);
    out.emplace_back("ontology.E", p.ontology.basic);
    out.emplace_back("ontology.W_alpha", p.ontology.attention.W);
    out.emplace_back("ontology.b_alpha", p.ontology.attention.b);
    out.emplace_back("ontology.w_alpha", p.ontology.attention.w);
    for (std::size_t l = 0; l < p.integrators.size(); ++l) {
        const auto& ip = p.integrators[l];
        const std::string pre = "integrator." + std::to_string(l);
        name_attention(out, pre + ".code_attention", ip.code_attention);
        name_attention(out, pre + ".node_attention", ip.node_attention);
        out.emplace_back(pre + ".fuse_code", ip.fuse_code);
        out.emplace_back(pre + ".fuse_node", ip.fuse_node);
        out.emplace_back(pre + ".fuse_bias", ip.fuse_bias);
        out.emplace_back(pre + ".out_code", ip.out_code);
        out.emplace_back(pre + ".out_code_bias", ip.out_code_bias);
        out.emplace_back(pre + ".out_node", ip.out_node);
        out.emplace_back(pre + ".out_node_bias", ip.out_node_bias);
    }
    out.emplace_back("pooling.W1", p.pooling.W1);
    out.emplace_back("pooling.b1", p.pooling.b1);
    out.emplace_back("pooling.w", p.pooling.w);
    out.emplace_back("pooling.b", p.pooling.b);
    out.emplace_back("visit_positions", p.visit_positions);
    for (std::size_t l = 0; l < p.encoder.size(); ++l) {
        const auto& e = p.encoder[l];
        const std::string pre = "encoder." + std::to_string(l);
        name_attention(out, pre + ".attention", e.attention);
        out.emplace_back(pre + ".ln1_gain", e.ln1_gain);
        out.emplace_back(pre + ".ln1_bias", e.ln1_bias);
        out.emplace_back(pre + ".ffn_in", e.ffn_in);
        out.emplace_back(pre + ".ffn_in_bias", e.ffn_in_bias);
        out.emplace_back(pre + ".ffn_out", e.ffn_out);
        out.emplace_back(pre + ".ffn_out_bias", e.ffn_out_bias);
        out.emplace_back(pre + ".ln2_gain", e.ln2_gain);
        out.emplace_back(pre + ".ln2_bias", e.ln2_bias);
    }
    out.emplace_back("next.W_P", p.next_weight);
    out.emplace_back("next.b_P", p.next_bias);
    out.emplace_back("typing.W_V", p.typing_weight);
    out.emplace_back("typing.b_V", p.typing_bias);
    return out;
}

std::size_t MipoModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.size();
    return n;
}

MipoModel MipoModel::clone() const {
    MipoModel copy(config_, 0);
    auto dst = copy.named_parameters();
    auto src = named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto in = src[i].second.data();
        auto out = dst[i].second.mutable_data();
        std::copy(in.begin(), in.end(), out.begin());
    }
    return copy;
}

void MipoModel::zero_grad() {
    for (auto& [name, t] : named_parameters()) t.zero_grad();
}

// --- building blocks --------------------------------------------------------

Tensor RunContext::maybe_dropout(const Tensor& x) const {
    if (!train || dropout <= 0.0 || rng == nullptr) return x;
    return ad::dropout(x, dropout, *rng);
}

std::pair<Tensor, Tensor> embed_visit(std::span<const std::int64_t> codes, const ad::Mask& mask,
                                      const Tensor& code_embedding, const Tensor& G) {
    if (mask.size() != codes.size()) throw ad::ShapeError("embed_visit: mask and code slots differ in length");
    if (code_embedding.dim(0) != G.dim(0)) {
        throw ad::ShapeError("embed_visit: code table " + ad::to_string(code_embedding.shape()) + " and G " +
                             ad::to_string(G.shape()) + " disagree on |C|");
    }
    std::vector<std::int64_t> rows(codes.size(), -1);
    const auto limit = static_cast<std::int64_t>(code_embedding.dim(0));
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (!mask[i]) continue;
        if (codes[i] < 0 || codes[i] >= limit) {
            throw std::out_of_range("embed_visit: unknown code id " + std::to_string(codes[i]));
        }
        rows[i] = codes[i];
    }
    return {ad::gather_rows(code_embedding, rows), ad::gather_rows(G, rows)};
}

Tensor multi_head_self_attention(const Tensor& X, const AttentionParams& p, std::size_t heads, const ad::Mask& mask,
                                 bool causal, const RunContext& ctx) {
    if (X.rank() != 2) throw ad::ShapeError("attention: expected [n x d] input, got " + ad::to_string(X.shape()));
    const std::size_t n = X.dim(0), d = X.dim(1);
    if (heads == 0 || d % heads != 0) {
        throw ad::ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    }
    if (mask.size() != n) throw ad::ShapeError("attention: mask length " + std::to_string(mask.size()) + " != " + std::to_string(n));
    const std::size_t dh = d / heads;

    ad::Mask admissible(n * n, 0);
    bool any_masked_row = false;
    for (std::size_t r = 0; r < n; ++r) {
        if (!mask[r]) {
            any_masked_row = true;
            continue;
        }
        for (std::size_t c = 0; c < n; ++c) admissible[r * n + c] = mask[c] && (!causal || c <= r);
    }

    Tensor Q = ad::add(ad::matmul(X, p.Wq), p.bq);
    Tensor K = ad::add(ad::matmul(X, p.Wk), p.bk);
    Tensor V = ad::add(ad::matmul(X, p.Wv), p.bv);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outputs;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor q = heads == 1 ? Q : ad::slice_cols(Q, h * dh, dh);
        Tensor k = heads == 1 ? K : ad::slice_cols(K, h * dh, dh);
        Tensor v = heads == 1 ? V : ad::slice_cols(V, h * dh, dh);
        Tensor scores = ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt);
        outputs.push_back(ad::matmul(ad::masked_softmax(scores, admissible), v));
    }
    Tensor joined = heads == 1 ? outputs[0] : ad::concat_last_axis(outputs);
    Tensor out = ad::add(ad::matmul(joined, p.Wo), p.bo);
    if (any_masked_row) {
        std::vector<double> keep(n * d);
        for (std::size_t r = 0; r < n; ++r) std::fill_n(keep.begin() + r * d, d, mask[r] ? 1.0 : 0.0);
        out = ad::mul(out, Tensor({n, d}, std::move(keep)));
    }
    return ctx.maybe_dropout(out);
}

Tensor activate(const Tensor& x, Activation a) {
    switch (a) {
        case Activation::kRelu: return ad::relu(x);
        case Activation::kTanh: return ad::tanh(x);
        case Activation::kSigmoid: return ad::sigmoid(x);
    }
    return x;
}

std::pair<Tensor, Tensor> integrator_layer(const Tensor& code_stream, const Tensor& node_stream,
                                           const IntegratorParams& p, const ModelConfig& config, const ad::Mask& mask,
                                           const RunContext& ctx) {
    if (code_stream.shape() != node_stream.shape()) {
        throw ad::ShapeError("integrator: stream shapes differ: " + ad::to_string(code_stream.shape()) + " vs " +
                             ad::to_string(node_stream.shape()));
    }
    Tensor w = multi_head_self_attention(code_stream, p.code_attention, config.heads, mask, false, ctx);
    Tensor g = multi_head_self_attention(node_stream, p.node_attention, config.heads, mask, false, ctx);
    Tensor h = activate(ad::add(ad::add(ad::matmul(w, p.fuse_code), ad::matmul(g, p.fuse_node)), p.fuse_bias),
                        config.activation);
    h = ctx.maybe_dropout(h);
    Tensor code_out = activate(ad::add(ad::matmul(h, p.out_code), p.out_code_bias), config.activation);
    Tensor node_out = activate(ad::add(ad::matmul(h, p.out_node), p.out_node_bias), config.activation);
    return {code_out, node_out};
}

std::pair<Tensor, Tensor> v_encoder(const Tensor& code_stream, const Tensor& node_stream,
                                    std::span<const IntegratorParams> layers, const ModelConfig& config,
                                    const ad::Mask& mask, const RunContext& ctx) {
    if (layers.empty()) throw std::invalid_argument("v_encoder: no integrator layers");
    std::pair<Tensor, Tensor> streams{code_stream, node_stream};
    for (const auto& layer : layers) streams = integrator_layer(streams.first, streams.second, layer, config, mask, ctx);
    return streams;
}

Tensor pooling_weights(const Tensor& code_outputs, const PoolingParams& p, Activation activation, const ad::Mask& mask) {
    const std::size_t n = code_outputs.dim(0), d = code_outputs.dim(1);
    if (mask.size() != n) throw ad::ShapeError("attention_pooling: mask length does not match " + ad::to_string(code_outputs.shape()));
    bool any = false;
    for (auto m : mask) any = any || m;
    if (!any) throw std::invalid_argument("attention_pooling: every position is masked");
    Tensor hidden = activate(ad::add(ad::matmul(code_outputs, p.W1), p.b1), activation);
    Tensor scores = ad::add(ad::matmul(hidden, ad::reshape(p.w, {d, 1})), p.b);
    return ad::masked_softmax(ad::reshape(scores, {1, n}), mask);
}

Tensor attention_pooling(const Tensor& code_outputs, const PoolingParams& p, Activation activation, const ad::Mask& mask) {
    return ad::matmul(pooling_weights(code_outputs, p, activation, mask), code_outputs);
}

Tensor p_encoder(const Tensor& visit_vectors, const Tensor& positions, std::span<const EncoderLayerParams> layers,
                 const ModelConfig& config, const ad::Mask& step_mask, const RunContext& ctx) {
    const std::size_t steps = visit_vectors.dim(0);
    if (steps > positions.dim(0)) {
        throw std::invalid_argument("p_encoder: " + std::to_string(steps) + " visits exceed max_visits " +
                                    std::to_string(positions.dim(0)));
    }
    Tensor x = ad::add(visit_vectors, ad::slice_rows(positions, 0, steps));
    for (const auto& layer : layers) {
        Tensor attn = multi_head_self_attention(x, layer.attention, config.heads, step_mask, config.causal, ctx);
        x = ad::layer_norm(ad::add(x, attn), layer.ln1_gain, layer.ln1_bias);
        Tensor ffn = ad::add(ad::matmul(ad::gelu(ad::add(ad::matmul(x, layer.ffn_in), layer.ffn_in_bias)), layer.ffn_out),
                             layer.ffn_out_bias);
        x = ad::layer_norm(ad::add(x, ctx.maybe_dropout(ffn)), layer.ln2_gain, layer.ln2_bias);
    }
    return x;
}

Tensor predict_next(const Tensor& encoded, const Tensor& weight, const Tensor& bias, NextVisitHead head) {
    Tensor logits = ad::add(ad::matmul(encoded, ad::transpose(weight)), bias);
    return head == NextVisitHead::kSoftmax ? ad::softmax(logits, 1) : ad::sigmoid(logits);
}

Tensor predict_typing(const Tensor& node_outputs, const Tensor& weight, const Tensor& bias) {
    return ad::softmax(ad::add(ad::matmul(node_outputs, ad::transpose(weight)), bias), 1);
}

// --- full pass --------------------------------------------------------------

ForwardOutput forward(const ehr::Batch& batch, const MipoModel& model, const ontology::OntologyGraph& graph, Mode mode,
                      std::mt19937_64* rng) {
    const ModelConfig& cfg = model.config();
    const ModelParameters& p = model.params();
    if (graph.num_nodes() != cfg.num_nodes || graph.num_leaves() != cfg.num_codes) {
        throw std::invalid_argument("forward: ontology has " + std::to_string(graph.num_leaves()) + " codes / " +
                                    std::to_string(graph.num_nodes()) + " nodes, model expects " +
                                    std::to_string(cfg.num_codes) + " / " + std::to_string(cfg.num_nodes));
    }
    if (batch.num_labels != cfg.labels || batch.num_categories != cfg.categories) {
        throw std::invalid_argument("forward: batch has " + std::to_string(batch.num_labels) + " labels / " +
                                    std::to_string(batch.num_categories) + " categories, model expects " +
                                    std::to_string(cfg.labels) + " / " + std::to_string(cfg.categories));
    }
    if (batch.steps() > cfg.max_visits) {
        throw std::invalid_argument("forward: batch needs " + std::to_string(batch.steps()) +
                                    " visit positions, model has " + std::to_string(cfg.max_visits));
    }
    RunContext ctx{mode == Mode::kTrain, cfg.dropout, rng};

    const Tensor G = ontology::compute_G(graph, p.ontology);
    const std::size_t S = batch.steps(), n = batch.max_codes, d = cfg.d;
    ForwardOutput out;
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
        ad::Mask step_mask(S, 0);
        std::vector<Tensor> rows;
        std::vector<Tensor> typing(S);
        for (std::size_t t = 0; t < S; ++t) {
            if (!batch.step_valid(b, t)) {
                rows.push_back(Tensor::zeros({1, d}));
                continue;
            }
            step_mask[t] = 1;
            const std::size_t off = batch.code_offset(b, t);
            std::span<const std::int64_t> codes(batch.codes.data() + off, n);
            ad::Mask mask(batch.code_mask.begin() + static_cast<std::ptrdiff_t>(off),
                          batch.code_mask.begin() + static_cast<std::ptrdiff_t>(off + n));
            auto [code_stream, node_stream] = embed_visit(codes, mask, p.code_embedding, G);
            auto [code_out, node_out] = v_encoder(code_stream, node_stream, p.integrators, cfg, mask, ctx);
            rows.push_back(attention_pooling(code_out, p.pooling, cfg.activation, mask));
            typing[t] = predict_typing(node_out, p.typing_weight, p.typing_bias);
        }
        Tensor visits = ad::concat_rows(rows);
        Tensor encoded = p_encoder(visits, p.visit_positions, p.encoder, cfg, step_mask, ctx);
        out.next_visit_probs.push_back(predict_next(encoded, p.next_weight, p.next_bias, cfg.head));
        out.typing_probs.push_back(std::move(typing));
        out.visit_reprs.push_back(visits);
        out.encoded.push_back(encoded);
    }
    return out;
}

// --- checkpoints ------------------------------------------------------------

namespace {
constexpr const char* kCheckpointTag = "mipo-checkpoint";
constexpr int kCheckpointVersion = 1;

std::string hexfloat(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

std::map<std::string, std::string> config_fields(const ModelConfig& c) {
    return {
        {"d", std::to_string(c.d)},
        {"heads", std::to_string(c.heads)},
        {"v_layers", std::to_string(c.v_layers)},
        {"p_layers", std::to_string(c.p_layers)},
        {"categories", std::to_string(c.categories)},
        {"labels", std::to_string(c.labels)},
        {"num_codes", std::to_string(c.num_codes)},
        {"num_nodes", std::to_string(c.num_nodes)},
        {"attention_hidden", std::to_string(c.attention_hidden)},
        {"dropout", hexfloat(c.dropout)},
        {"max_visits", std::to_string(c.max_visits)},
        {"max_codes", std::to_string(c.max_codes)},
        {"causal", c.causal ? "1" : "0"},
        {"activation", to_string(c.activation)},
        {"head", to_string(c.head)},
    };
}

std::size_t to_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
        throw std::runtime_error("checkpoint: bad value '" + v + "' for " + key);
    }
}

double to_double(const std::string& v) {
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0') throw std::runtime_error("checkpoint: bad number '" + v + "'");
    return x;
}
}  // namespace

void save_checkpoint(std::ostream& out, const MipoModel& model) {
    out << kCheckpointTag << ' ' << kCheckpointVersion << '\n';
    for (const auto& [k, v] : config_fields(model.config())) out << "config " << k << '=' << v << '\n';
    for (const auto& [name, t] : model.named_parameters()) {
        out << "tensor " << name << ' ' << t.rank();
        for (std::size_t e : t.shape()) out << ' ' << e;
        out << '\n';
        bool first = true;
        for (double v : t.data()) {
            if (!first) out << ' ';
            out << hexfloat(v);
            first = false;
        }
        out << '\n';
    }
    out << "end\n";
}

void save_checkpoint(const std::string& path, const MipoModel& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    save_checkpoint(out, model);
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

MipoModel load_checkpoint(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint: empty input");
    {
        std::istringstream head(line);
        std::string tag;
        int version = 0;
        head >> tag >> version;
        if (tag != kCheckpointTag) throw std::runtime_error("checkpoint: missing '" + std::string(kCheckpointTag) + "' header");
        if (version != kCheckpointVersion) {
            throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
        }
    }
    std::map<std::string, std::string> fields;
    std::streampos mark = in.tellg();
    while (std::getline(in, line) && line.rfind("config ", 0) == 0) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("checkpoint: malformed config line '" + line + "'");
        fields[line.substr(7, eq - 7)] = line.substr(eq + 1);
        mark = in.tellg();
    }
    in.clear();
    in.seekg(mark);

    auto field = [&](const char* key) -> const std::string& {
        auto it = fields.find(key);
        if (it == fields.end()) throw std::runtime_error(std::string("checkpoint: config lacks '") + key + "'");
        return it->second;
    };
    ModelConfig c;
    c.d = to_size("d", field("d"));
    c.heads = to_size("heads", field("heads"));
    c.v_layers = to_size("v_layers", field("v_layers"));
    c.p_layers = to_size("p_layers", field("p_layers"));
    c.categories = to_size("categories", field("categories"));
    c.labels = to_size("labels", field("labels"));
    c.num_codes = to_size("num_codes", field("num_codes"));
    c.num_nodes = to_size("num_nodes", field("num_nodes"));
    c.attention_hidden = to_size("attention_hidden", field("attention_hidden"));
    c.dropout = to_double(field("dropout"));
    c.max_visits = to_size("max_visits", field("max_visits"));
    c.max_codes = to_size("max_codes", field("max_codes"));
    c.causal = field("causal") == "1";
    c.activation = parse_activation(field("activation"));
    c.head = parse_head(field("head"));

    MipoModel model(c, 0);
    for (auto& [name, t] : model.named_parameters()) {
        if (!std::getline(in, line)) throw std::runtime_error("checkpoint: truncated before tensor '" + name + "'");
        std::istringstream head(line);
        std::string kw, got;
        std::size_t rank = 0;
        head >> kw >> got >> rank;
        if (kw != "tensor" || got != name) {
            throw std::runtime_error("checkpoint: expected tensor '" + name + "', found '" + line + "'");
        }
        ad::Shape shape(rank);
        for (auto& e : shape) head >> e;
        if (shape != t.shape()) {
            throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " + ad::to_string(shape) +
                                     " but the config implies " + ad::to_string(t.shape()));
        }
        if (!std::getline(in, line)) throw std::runtime_error("checkpoint: missing values for '" + name + "'");
        std::istringstream values(line);
        auto dst = t.mutable_data();
        std::string tok;
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (!(values >> tok)) throw std::runtime_error("checkpoint: too few values for '" + name + "'");
            dst[i] = to_double(tok);
        }
        if (values >> tok) throw std::runtime_error("checkpoint: too many values for '" + name + "'");
    }
    if (!std::getline(in, line) || line != "end") throw std::runtime_error("checkpoint: missing end marker");
    return model;
}

MipoModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    return load_checkpoint(in);
}

}  // namespace mipo::model
