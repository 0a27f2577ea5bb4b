#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "duet/config.hpp"
#include "duet/error.hpp"
#include "duet/image.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

enum class ModalityTag { TEXT, VIT, VAE };
enum class ExpertGroup { UNDERSTANDING, GENERATION };
enum class SequenceMode { UNDERSTAND, GENERATE, INTERLEAVED };

inline const char* tag_name(ModalityTag t) {
    switch (t) {
        case ModalityTag::TEXT: return "TEXT";
        case ModalityTag::VIT: return "VIT";
        case ModalityTag::VAE: return "VAE";
    }
    throw RoutingError("tag_name: unknown modality tag");
}

/// Hard routing rule: semantic tokens (TEXT, VIT) belong to the
/// understanding expert, latent tokens (VAE) to the generation expert.
inline ExpertGroup expert_of(ModalityTag t) {
    switch (t) {
        case ModalityTag::TEXT:
        case ModalityTag::VIT: return ExpertGroup::UNDERSTANDING;
        case ModalityTag::VAE: return ExpertGroup::GENERATION;
    }
    throw RoutingError("expert_of: unknown modality tag");
}

/// One shared token stream: per-token tags, global positions, a square
/// admissibility mask (mask[q*n+k] = 1 means query q may read key k), source
/// ids/latents for each segment, and the flow time carried by latent tokens.
struct TokenSequence {
    std::vector<ModalityTag> tags;
    std::vector<std::int64_t> text_ids;  // aligned with tags, -1 at non-TEXT slots
    Tensor z_vit;                        // [n_vit, d_v], rows consumed in tag order
    Tensor z_vae;                        // [n_vae, d_z]
    std::vector<std::int64_t> positions;
    std::vector<std::uint8_t> mask;
    std::optional<double> flow_time;

    std::int64_t size() const { return static_cast<std::int64_t>(tags.size()); }

    bool admits(std::int64_t q, std::int64_t k) const {
        return mask[static_cast<std::size_t>(q * size() + k)] != 0;
    }

    std::vector<std::int64_t> rows_with(ModalityTag t) const {
        std::vector<std::int64_t> out;
        for (std::int64_t i = 0; i < size(); ++i)
            if (tags[static_cast<std::size_t>(i)] == t) out.push_back(i);
        return out;
    }

    std::vector<std::int64_t> rows_of(ExpertGroup g) const {
        std::vector<std::int64_t> out;
        for (std::int64_t i = 0; i < size(); ++i)
            if (expert_of(tags[static_cast<std::size_t>(i)]) == g) out.push_back(i);
        return out;
    }

    void validate() const {
        const auto n = size();
        if (n == 0) throw ContractError("TokenSequence: empty sequence");
        if (text_ids.size() != tags.size() || positions.size() != tags.size())
            throw ContractError("TokenSequence: field lengths disagree");
        if (mask.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(n))
            throw ContractError("TokenSequence: mask is not n x n");
        std::int64_t nv = 0, nt = 0, nz = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            switch (tags[static_cast<std::size_t>(i)]) {
                case ModalityTag::TEXT:
                    if (text_ids[static_cast<std::size_t>(i)] < 0)
                        throw ContractError("TokenSequence: TEXT token without id");
                    ++nt;
                    break;
                case ModalityTag::VIT: ++nv; break;
                case ModalityTag::VAE: ++nz; break;
            }
        }
        if ((z_vit.numel() > 0 ? z_vit.dim(0) : 0) != nv)
            throw ContractError("TokenSequence: VIT token count does not match z_vit rows");
        if ((z_vae.numel() > 0 ? z_vae.dim(0) : 0) != nz)
            throw ContractError("TokenSequence: VAE token count does not match z_vae rows");
        if (flow_time.has_value() != (nz > 0))
            throw ContractError("TokenSequence: flow_time present iff latent tokens present");
        if (flow_time && !(*flow_time >= 0.0 && *flow_time <= 1.0))
            throw ContractError("TokenSequence: flow_time outside [0,1]");
    }
};

/// Assembles the token stream for one record. Segment order and visibility:
///   UNDERSTAND  [VIT, TEXT]       TEXT is causal and reads all VIT; VIT reads VIT.
///   GENERATE    [TEXT, VAE]       TEXT causal among itself; VAE reads everything.
///   INTERLEAVED [VIT, TEXT, VAE]  as above; VAE reads VIT only when
///                                 vae_sees_vit is set (off by default).
inline TokenSequence build_sequence(const std::vector<std::int64_t>& text_ids, Tensor z_vit,
                                    Tensor z_vae, SequenceMode mode,
                                    std::optional<double> flow_time = std::nullopt,
                                    bool vae_sees_vit = false) {
    const std::int64_t nv = z_vit.numel() > 0 ? z_vit.dim(0) : 0;
    const std::int64_t nt = static_cast<std::int64_t>(text_ids.size());
    const std::int64_t nz = z_vae.numel() > 0 ? z_vae.dim(0) : 0;
    if (mode == SequenceMode::UNDERSTAND && nz > 0)
        throw ContractError("build_sequence: UNDERSTAND carries no latent tokens");
    if (mode == SequenceMode::GENERATE && nv > 0)
        throw ContractError("build_sequence: GENERATE carries no VIT tokens");
    for (auto id : text_ids)
        if (id < 0) throw ValidationError("build_sequence: negative text id");

    TokenSequence seq;
    seq.z_vit = std::move(z_vit);
    seq.z_vae = std::move(z_vae);
    seq.flow_time = flow_time;

    // segment order is VIT, TEXT, VAE in every mode; modes differ only in
    // which segments exist
    const std::int64_t vit0 = 0, text0 = nv, vae0 = nv + nt, n = nv + nt + nz;
    if (n == 0) throw ContractError("build_sequence: empty sequence");
    seq.tags.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < nv; ++i) seq.tags.push_back(ModalityTag::VIT);
    for (std::int64_t i = 0; i < nt; ++i) seq.tags.push_back(ModalityTag::TEXT);
    for (std::int64_t i = 0; i < nz; ++i) seq.tags.push_back(ModalityTag::VAE);
    seq.text_ids.assign(static_cast<std::size_t>(n), -1);
    for (std::int64_t i = 0; i < nt; ++i) seq.text_ids[static_cast<std::size_t>(text0 + i)] = text_ids[static_cast<std::size_t>(i)];
    seq.positions.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) seq.positions[static_cast<std::size_t>(i)] = i;

    seq.mask.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
    auto admit = [&](std::int64_t q, std::int64_t k) {
        seq.mask[static_cast<std::size_t>(q * n + k)] = 1;
    };
    for (std::int64_t q = 0; q < nv; ++q)
        for (std::int64_t k = 0; k < nv; ++k) admit(vit0 + q, vit0 + k);
    for (std::int64_t q = 0; q < nt; ++q) {
        for (std::int64_t k = 0; k < nv; ++k) admit(text0 + q, vit0 + k);
        for (std::int64_t k = 0; k <= q; ++k) admit(text0 + q, text0 + k);
    }
    for (std::int64_t q = 0; q < nz; ++q) {
        if (vae_sees_vit)
            for (std::int64_t k = 0; k < nv; ++k) admit(vae0 + q, vit0 + k);
        for (std::int64_t k = 0; k < nt; ++k) admit(vae0 + q, text0 + k);
        for (std::int64_t k = 0; k < nz; ++k) admit(vae0 + q, vae0 + k);
    }

    seq.validate();
    return seq;
}

/// Dual-encoder mixture-of-experts model. Parameter names are dotted paths;
/// the leading segment is the freeze/routing group:
///   vit.*  visual semantic encoder        und.*  understanding expert + text head
///   vae.*  latent autoencoder             gen.*  generation expert + velocity head
class UnifiedModel {
  public:
    UnifiedModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        declare_params();
        init_params(seed);
    }

    const ModelConfig& config() const { return cfg_; }

    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }

    const Tensor& param(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ContractError("UnifiedModel: no parameter " + name);
        return it->second;
    }
    Tensor& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ContractError("UnifiedModel: no parameter " + name);
        return it->second;
    }

    static std::string group_of(const std::string& name) {
        const auto dot = name.find('.');
        if (dot == std::string::npos) throw ContractError("UnifiedModel: ungrouped parameter " + name);
        return name.substr(0, dot);
    }

    /// Overwrites parameter data from a loaded snapshot; names and shapes
    /// must match the declared set exactly.
    void load_state(const std::map<std::string, Tensor>& state) {
        if (state.size() != params_.size())
            throw ValidationError("load_state: expected " + std::to_string(params_.size()) +
                                  " parameters, got " + std::to_string(state.size()));
        for (auto& [name, t] : params_) {
            auto it = state.find(name);
            if (it == state.end()) throw ValidationError("load_state: missing parameter " + name);
            if (it->second.shape() != t.shape())
                throw ValidationError("load_state: shape mismatch for " + name);
            t.data() = it->second.data();
        }
    }

    /// Detached value snapshot, suitable for the checkpoint writer.
    std::map<std::string, Tensor> state() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, t] : params_) out.emplace(name, t.detached());
        return out;
    }

    // ---- encoders -------------------------------------------------------

    Tensor vit_encode(const Image& img) const {
        Tensor x = patchify(img, cfg_.patch);
        const std::int64_t n = x.dim(0);
        if (n > cfg_.vit_tokens())
            throw ValidationError("vit_encode: image yields " + std::to_string(n) +
                                  " patches, table holds " + std::to_string(cfg_.vit_tokens()));
        x = add_bias(matmul(x, param("vit.patch_embed.w")), param("vit.patch_embed.b"));
        x = add(x, slice_rows(param("vit.pos"), 0, n));
        for (std::int64_t l = 0; l < cfg_.vit_depth; ++l) {
            const std::string p = "vit.block" + std::to_string(l) + ".";
            std::vector<std::int64_t> all(static_cast<std::size_t>(n));
            std::iota(all.begin(), all.end(), 0);
            x = mixed_block(x, {{p, all}}, nullptr, cfg_.vit_width);
        }
        return x;
    }

    Tensor vae_encode(const Image& img) const {
        Tensor x = patchify(img, cfg_.latent_patch);
        return add_bias(matmul(x, param("vae.enc.w")), param("vae.enc.b"));
    }

    /// Unclamped pixel-patch reconstruction, the trainable path.
    Tensor vae_decode_raw(const Tensor& z) const {
        if (z.rank() != 2 || z.dim(1) != cfg_.latent_dim)
            throw ShapeError("vae_decode: latent " + shape_str(z.shape()) + " has wrong width");
        return add_bias(matmul(z, param("vae.dec.w")), param("vae.dec.b"));
    }

    /// Image-boundary decode: clamps into pixel range.
    Image vae_decode(const Tensor& z, std::int64_t height = -1, std::int64_t width = -1) const {
        if (!z.all_finite()) throw NumericError("vae_decode: non-finite latent");
        if (height < 0) height = cfg_.image_size;
        if (width < 0) width = cfg_.image_size;
        const std::int64_t m = (height / cfg_.latent_patch) * (width / cfg_.latent_patch);
        if (z.rank() != 2 || z.dim(0) != m)
            throw ShapeError("vae_decode: latent " + shape_str(z.shape()) + " does not tile " +
                             std::to_string(height) + "x" + std::to_string(width));
        NoGradGuard ng;
        Tensor patches = vae_decode_raw(z);
        Image img = unpatchify(patches, height, width, cfg_.channels, cfg_.latent_patch);
        for (auto& p : img.pixels) p = std::clamp(p, 0.0, 1.0);
        return img;
    }

    // ---- backbone -------------------------------------------------------

    /// Projects every segment to width d, adds positional rows (shared index,
    /// per-expert tables) and the flow-time conditioning at latent slots.
    Tensor embed_sequence(const TokenSequence& seq) const {
        seq.validate();
        const std::int64_t n = seq.size();
        if (n > cfg_.max_positions)
            throw ValidationError("embed_sequence: " + std::to_string(n) + " tokens exceed max_positions " +
                                  std::to_string(cfg_.max_positions));
        const auto text_rows = seq.rows_with(ModalityTag::TEXT);
        const auto vit_rows = seq.rows_with(ModalityTag::VIT);
        const auto vae_rows = seq.rows_with(ModalityTag::VAE);
        std::vector<Tensor> parts;
        std::vector<const std::vector<std::int64_t>*> part_rows;

        if (!text_rows.empty()) {
            std::vector<std::int64_t> ids, pos;
            for (auto r : text_rows) {
                const auto id = seq.text_ids[static_cast<std::size_t>(r)];
                if (id >= cfg_.vocab)
                    throw ValidationError("embed_sequence: text id " + std::to_string(id) +
                                          " outside vocab " + std::to_string(cfg_.vocab));
                ids.push_back(id);
                pos.push_back(seq.positions[static_cast<std::size_t>(r)]);
            }
            Tensor x = add(gather_rows(param("und.embed"), ids), gather_rows(param("und.pos"), pos));
            parts.push_back(x);
            part_rows.push_back(&text_rows);
        }
        if (!vit_rows.empty()) {
            if (seq.z_vit.dim(1) != cfg_.vit_width)
                throw ShapeError("embed_sequence: z_vit width " + std::to_string(seq.z_vit.dim(1)) +
                                 " != " + std::to_string(cfg_.vit_width));
            std::vector<std::int64_t> pos;
            for (auto r : vit_rows) pos.push_back(seq.positions[static_cast<std::size_t>(r)]);
            Tensor x = add_bias(matmul(seq.z_vit, param("und.proj_vit.w")), param("und.proj_vit.b"));
            x = add(x, gather_rows(param("und.pos"), pos));
            parts.push_back(x);
            part_rows.push_back(&vit_rows);
        }
        if (!vae_rows.empty()) {
            if (seq.z_vae.dim(1) != cfg_.latent_dim)
                throw ShapeError("embed_sequence: z_vae width " + std::to_string(seq.z_vae.dim(1)) +
                                 " != " + std::to_string(cfg_.latent_dim));
            std::vector<std::int64_t> pos;
            for (auto r : vae_rows) pos.push_back(seq.positions[static_cast<std::size_t>(r)]);
            Tensor x = add_bias(matmul(seq.z_vae, param("gen.proj_vae.w")), param("gen.proj_vae.b"));
            x = add(x, gather_rows(param("gen.pos"), pos));
            Tensor temb = time_embedding(*seq.flow_time);
            x = add_bias(x, temb);
            parts.push_back(x);
            part_rows.push_back(&vae_rows);
        }

        if (parts.size() == 1 && part_rows[0]->size() == static_cast<std::size_t>(n) &&
            std::is_sorted(part_rows[0]->begin(), part_rows[0]->end()))
            return parts[0];
        Tensor X = scatter_rows(parts[0], *part_rows[0], n);
        for (std::size_t i = 1; i < parts.size(); ++i)
            X = add(X, scatter_rows(parts[i], *part_rows[i], n));
        return X;
    }

    /// L mixture layers over an already-embedded sequence. Each token's
    /// Q/K/V/O and MLP come from its tag's expert; attention runs over the
    /// full masked sequence.
    Tensor backbone_forward(Tensor X, const std::vector<ModalityTag>& tags,
                            const std::vector<std::uint8_t>& mask) const {
        const std::int64_t n = X.dim(0);
        if (static_cast<std::int64_t>(tags.size()) != n)
            throw ShapeError("backbone_forward: " + std::to_string(tags.size()) + " tags for " +
                             std::to_string(n) + " rows");
        if (mask.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(n))
            throw ShapeError("backbone_forward: mask is not n x n");
        if (X.dim(1) != cfg_.width) throw ShapeError("backbone_forward: row width != d");

        std::vector<std::int64_t> und_rows, gen_rows;
        for (std::int64_t i = 0; i < n; ++i) {
            switch (expert_of(tags[static_cast<std::size_t>(i)])) {
                case ExpertGroup::UNDERSTANDING: und_rows.push_back(i); break;
                case ExpertGroup::GENERATION: gen_rows.push_back(i); break;
            }
        }

        Tensor bias = mask_bias(mask, n);
        for (std::int64_t l = 0; l < cfg_.depth; ++l) {
            std::vector<std::pair<std::string, std::vector<std::int64_t>>> routes;
            if (!und_rows.empty()) {
                routes.emplace_back("und.layer" + std::to_string(l) + ".", und_rows);
                ++und_applications_;
            }
            if (!gen_rows.empty()) {
                routes.emplace_back("gen.layer" + std::to_string(l) + ".", gen_rows);
                ++gen_applications_;
            }
            X = mixed_block(X, routes, &bias, cfg_.width);
        }
        return X;
    }

    Tensor mot_forward(const TokenSequence& seq) const {
        return backbone_forward(embed_sequence(seq), seq.tags, seq.mask);
    }

    // ---- heads ----------------------------------------------------------

    Tensor lm_logits(const Tensor& hidden, const std::vector<std::int64_t>& text_rows) const {
        if (text_rows.empty()) throw ContractError("lm_logits: no TEXT positions");
        Tensor h = gather_rows(hidden, text_rows);
        h = layer_norm(h, param("und.final_ln.g"), param("und.final_ln.b"), 1e-5);
        return add_bias(matmul(h, param("und.lm_head.w")), param("und.lm_head.b"));
    }

    Tensor predict_velocity(const Tensor& hidden, const std::vector<std::int64_t>& vae_rows) const {
        if (vae_rows.empty()) throw ContractError("predict_velocity: no latent positions");
        Tensor h = gather_rows(hidden, vae_rows);
        h = layer_norm(h, param("gen.final_ln.g"), param("gen.final_ln.b"), 1e-5);
        return add_bias(matmul(h, param("gen.velocity_head.w")), param("gen.velocity_head.b"));
    }

    /// One velocity evaluation v(z_t, t | condition): GENERATE sequence with
    /// the conditioning ids followed by the current latent tokens.
    Tensor velocity_field(const std::vector<std::int64_t>& cond_ids, const Tensor& z_t, double t) const {
        TokenSequence seq = build_sequence(cond_ids, Tensor(), z_t, SequenceMode::GENERATE, t,
                                           cfg_.vae_sees_vit);
        Tensor hidden = mot_forward(seq);
        return predict_velocity(hidden, seq.rows_with(ModalityTag::VAE));
    }

    /// Image-conditioned variant: an interleaved sequence carrying the
    /// encoded input image alongside the conditioning text.
    Tensor velocity_field(const std::vector<std::int64_t>& cond_ids, const Tensor& z_vit,
                          const Tensor& z_t, double t) const {
        TokenSequence seq = build_sequence(cond_ids, z_vit, z_t, SequenceMode::INTERLEAVED, t,
                                           cfg_.vae_sees_vit);
        Tensor hidden = mot_forward(seq);
        return predict_velocity(hidden, seq.rows_with(ModalityTag::VAE));
    }

    // ---- instrumentation ------------------------------------------------

    std::int64_t expert_applications(ExpertGroup g) const {
        return g == ExpertGroup::UNDERSTANDING ? und_applications_ : gen_applications_;
    }
    void reset_expert_counters() const { und_applications_ = gen_applications_ = 0; }

  private:
    void declare_params() {
        const auto d = cfg_.width, dv = cfg_.vit_width, dz = cfg_.latent_dim;
        auto mat = [&](const std::string& n, std::int64_t r, std::int64_t c) {
            params_.emplace(n, Tensor::zeros({r, c}));
        };
        auto vec = [&](const std::string& n, std::int64_t len) {
            params_.emplace(n, Tensor::zeros({len}));
        };
        auto block = [&](const std::string& p, std::int64_t w, std::int64_t mlp) {
            mat(p + "q.w", w, w); vec(p + "q.b", w);
            mat(p + "k.w", w, w); vec(p + "k.b", w);
            mat(p + "v.w", w, w); vec(p + "v.b", w);
            mat(p + "o.w", w, w); vec(p + "o.b", w);
            vec(p + "ln1.g", w); vec(p + "ln1.b", w);
            vec(p + "ln2.g", w); vec(p + "ln2.b", w);
            mat(p + "mlp.fc1.w", w, mlp); vec(p + "mlp.fc1.b", mlp);
            mat(p + "mlp.fc2.w", mlp, w); vec(p + "mlp.fc2.b", w);
        };

        mat("vit.patch_embed.w", cfg_.patch_dim(), dv);
        vec("vit.patch_embed.b", dv);
        mat("vit.pos", cfg_.vit_tokens(), dv);
        for (std::int64_t l = 0; l < cfg_.vit_depth; ++l)
            block("vit.block" + std::to_string(l) + ".", dv, cfg_.mlp_mult * dv);

        mat("vae.enc.w", cfg_.latent_patch_dim(), dz);
        vec("vae.enc.b", dz);
        mat("vae.dec.w", dz, cfg_.latent_patch_dim());
        vec("vae.dec.b", cfg_.latent_patch_dim());

        mat("und.proj_vit.w", dv, d);
        vec("und.proj_vit.b", d);
        mat("und.embed", cfg_.vocab, d);
        mat("und.pos", cfg_.max_positions, d);
        for (std::int64_t l = 0; l < cfg_.depth; ++l)
            block("und.layer" + std::to_string(l) + ".", d, cfg_.mlp_mult * d);
        vec("und.final_ln.g", d); vec("und.final_ln.b", d);
        mat("und.lm_head.w", d, cfg_.vocab);
        vec("und.lm_head.b", cfg_.vocab);

        mat("gen.proj_vae.w", dz, d);
        vec("gen.proj_vae.b", d);
        mat("gen.pos", cfg_.max_positions, d);
        mat("gen.time.w", cfg_.time_features, d);
        vec("gen.time.b", d);
        for (std::int64_t l = 0; l < cfg_.depth; ++l)
            block("gen.layer" + std::to_string(l) + ".", d, cfg_.mlp_mult * d);
        vec("gen.final_ln.g", d); vec("gen.final_ln.b", d);
        mat("gen.velocity_head.w", d, dz);
        vec("gen.velocity_head.b", dz);
    }

    /// Name-ordered initialization from one stream: weight matrices get
    /// N(0, 1/fan_in) entries, embedding/positional tables N(0, 0.02^2),
    /// norms identity, biases zero. Deterministic for a given seed.
    void init_params(std::uint64_t seed) {
        Rng rng(derive_seed(seed, "model-init"));
        for (auto& [name, t] : params_) {
            t.set_requires_grad(true);
            const bool is_norm_gain = name.ends_with("ln1.g") || name.ends_with("ln2.g") ||
                                      name.ends_with("final_ln.g");
            const bool is_table = name == "und.embed" || name.ends_with(".pos") || name == "vit.pos" ||
                                  name == "und.pos" || name == "gen.pos";
            if (is_norm_gain) {
                std::fill(t.data().begin(), t.data().end(), 1.0);
            } else if (t.rank() == 1) {
                // biases and norm shifts start at zero
            } else if (is_table) {
                for (auto& v : t.data()) v = rng.normal() * 0.02;
            } else {
                const double std = 1.0 / std::sqrt(static_cast<double>(t.dim(0)));
                for (auto& v : t.data()) v = rng.normal() * std;
            }
        }
    }

    Tensor time_embedding(double t) const {
        const std::int64_t F = cfg_.time_features;
        std::vector<double> feat(static_cast<std::size_t>(F), 0.0);
        for (std::int64_t j = 0; 2 * j < F; ++j) {
            const double w = std::pow(10000.0, -static_cast<double>(2 * j) / static_cast<double>(F));
            feat[static_cast<std::size_t>(2 * j)] = std::sin(w * t);
            if (2 * j + 1 < F) feat[static_cast<std::size_t>(2 * j + 1)] = std::cos(w * t);
        }
        Tensor f = Tensor::from_data({1, F}, std::move(feat));
        Tensor e = add_bias(matmul(f, param("gen.time.w")), param("gen.time.b"));
        return reshape(e, {cfg_.width});
    }

    static Tensor mask_bias(const std::vector<std::uint8_t>& mask, std::int64_t n) {
        std::vector<double> b(mask.size());
        for (std::size_t i = 0; i < mask.size(); ++i) b[i] = mask[i] ? 0.0 : -1e30;
        return Tensor::from_data({n, n}, std::move(b));
    }

    /// Pre-LN block with per-route parameters: attention over the union of
    /// routes (scores masked by bias), then per-route MLP. Routes must be
    /// disjoint and cover all rows.
    Tensor mixed_block(Tensor X,
                       const std::vector<std::pair<std::string, std::vector<std::int64_t>>>& routes,
                       const Tensor* bias, std::int64_t dim) const {
        if (routes.empty()) throw RoutingError("mixed_block: no routes");
        const std::int64_t n = X.dim(0);
        const bool single_total = routes.size() == 1 &&
                                  static_cast<std::int64_t>(routes[0].second.size()) == n;

        auto assemble = [&](const std::vector<Tensor>& blocks) {
            if (single_total) return blocks[0];
            Tensor full = scatter_rows(blocks[0], routes[0].second, n);
            for (std::size_t i = 1; i < blocks.size(); ++i)
                full = add(full, scatter_rows(blocks[i], routes[i].second, n));
            return full;
        };

        std::vector<Tensor> qs, ks, vs;
        for (const auto& [p, rows] : routes) {
            Tensor h = single_total ? X : gather_rows(X, rows);
            h = layer_norm(h, param(p + "ln1.g"), param(p + "ln1.b"), 1e-5);
            qs.push_back(add_bias(matmul(h, param(p + "q.w")), param(p + "q.b")));
            ks.push_back(add_bias(matmul(h, param(p + "k.w")), param(p + "k.b")));
            vs.push_back(add_bias(matmul(h, param(p + "v.w")), param(p + "v.b")));
        }
        Tensor Q = assemble(qs), K = assemble(ks), V = assemble(vs);
        Tensor scores = scale(matmul(Q, transpose(K)), 1.0 / std::sqrt(static_cast<double>(dim)));
        if (bias) scores = add(scores, *bias);
        Tensor ctx = matmul(softmax(scores, -1), V);

        std::vector<Tensor> outs;
        for (const auto& [p, rows] : routes) {
            Tensor c = single_total ? ctx : gather_rows(ctx, rows);
            outs.push_back(add_bias(matmul(c, param(p + "o.w")), param(p + "o.b")));
        }
        X = add(X, assemble(outs));

        std::vector<Tensor> mlps;
        for (const auto& [p, rows] : routes) {
            Tensor h = single_total ? X : gather_rows(X, rows);
            h = layer_norm(h, param(p + "ln2.g"), param(p + "ln2.b"), 1e-5);
            h = add_bias(matmul(h, param(p + "mlp.fc1.w")), param(p + "mlp.fc1.b"));
            h = gelu(h);
            h = add_bias(matmul(h, param(p + "mlp.fc2.w")), param(p + "mlp.fc2.b"));
            mlps.push_back(h);
        }
        return add(X, assemble(mlps));
    }

    ModelConfig cfg_;
    std::map<std::string, Tensor> params_;
    mutable std::int64_t und_applications_ = 0;
    mutable std::int64_t gen_applications_ = 0;
};

}  // namespace duet
