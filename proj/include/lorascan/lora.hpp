#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lorascan/error.hpp"
#include "lorascan/tensor.hpp"

namespace lorascan {

enum class Projection : int { Q = 0, K = 1, V = 2, O = 3 };

inline constexpr std::array<Projection, 4> kAllProjections = {
    Projection::Q, Projection::K, Projection::V, Projection::O};

inline char projection_letter(Projection p) {
    switch (p) {
        case Projection::Q: return 'q';
        case Projection::K: return 'k';
        case Projection::V: return 'v';
        case Projection::O: return 'o';
    }
    return '?';
}

inline std::optional<Projection> projection_from_letter(char c) {
    switch (c) {
        case 'q': return Projection::Q;
        case 'k': return Projection::K;
        case 'v': return Projection::V;
        case 'o': return Projection::O;
        default: return std::nullopt;
    }
}

inline std::set<Projection> all_projections() {
    return {Projection::Q, Projection::K, Projection::V, Projection::O};
}

// One LoRA factor pair for a single (layer, projection). A is rank x k,
// B is d_out x rank; the implied update is B * A.
struct LoraPair {
    int layer_index = 0;
    Projection projection = Projection::Q;
    Eigen::MatrixXd A;
    Eigen::MatrixXd B;

    Eigen::Index rank() const { return A.rows(); }
    Eigen::Index input_dim() const { return A.cols(); }
    Eigen::Index output_dim() const { return B.rows(); }
};

struct LoraKey {
    int layer = 0;
    Projection projection = Projection::Q;
    bool is_b = false;  // lora_B vs lora_A
};

namespace detail {

inline std::vector<std::string_view> split_dots(std::string_view s) {
    std::vector<std::string_view> parts;
    size_t start = 0;
    while (true) {
        const size_t dot = s.find('.', start);
        if (dot == std::string_view::npos) {
            parts.push_back(s.substr(start));
            break;
        }
        parts.push_back(s.substr(start, dot - start));
        start = dot + 1;
    }
    return parts;
}

inline std::optional<int> parse_uint(std::string_view s) {
    if (s.empty() || s.size() > 9) return std::nullopt;
    int v = 0;
    for (char c : s) {
        if (c < '0' || c > '9') return std::nullopt;
        v = v * 10 + (c - '0');
    }
    return v;
}

}  // namespace detail

// Recognizes the PEFT-style suffix
//   <prefix>.layers.<i>.self_attn.<p>_proj.lora_(A|B).weight
// with an arbitrary (possibly empty) prefix. Pure function of the name.
inline std::optional<LoraKey> parse_lora_key(std::string_view name) {
    const auto parts = detail::split_dots(name);
    if (parts.size() < 6) return std::nullopt;
    const size_t n = parts.size();
    if (parts[n - 1] != "weight") return std::nullopt;
    bool is_b = false;
    if (parts[n - 2] == "lora_B") is_b = true;
    else if (parts[n - 2] != "lora_A") return std::nullopt;
    const auto& proj = parts[n - 3];
    if (proj.size() != 6 || proj.substr(1) != "_proj") return std::nullopt;
    const auto p = projection_from_letter(proj[0]);
    if (!p) return std::nullopt;
    if (parts[n - 4] != "self_attn") return std::nullopt;
    const auto layer = detail::parse_uint(parts[n - 5]);
    if (!layer) return std::nullopt;
    if (parts[n - 6] != "layers") return std::nullopt;
    return LoraKey{*layer, *p, is_b};
}

namespace detail {

inline Eigen::MatrixXd record_to_matrix(const TensorRecord& rec) {
    if (rec.shape.size() != 2 || rec.shape[0] == 0 || rec.shape[1] == 0)
        throw Error(ErrorKind::RankMismatch,
                    "tensor \"" + rec.name + "\" is not a 2-D matrix with positive dims");
    const auto rows = static_cast<Eigen::Index>(rec.shape[0]);
    const auto cols = static_cast<Eigen::Index>(rec.shape[1]);
    // stored row-major, Eigen default is column-major
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                          Eigen::RowMajor>>(rec.values.data(), rows, cols);
}

}  // namespace detail

// Pairs lora_A/lora_B tensors by (layer, projection). Tensors whose names do
// not match the convention are skipped (names reported via `skipped` when
// given). Pairs are returned sorted by layer, then projection q,k,v,o.
inline std::vector<LoraPair> extract_lora_pairs(
    const std::map<std::string, TensorRecord>& tensors,
    std::optional<int> layer_filter = std::nullopt,
    const std::set<Projection>& projections = all_projections(),
    std::vector<std::string>* skipped = nullptr) {
    struct Slot {
        const TensorRecord* a = nullptr;
        const TensorRecord* b = nullptr;
    };
    std::map<std::pair<int, int>, Slot> slots;

    for (const auto& [name, rec] : tensors) {
        const auto key = parse_lora_key(name);
        if (!key) {
            if (skipped) skipped->push_back(name);
            continue;
        }
        if (layer_filter && key->layer != *layer_filter) continue;
        if (!projections.count(key->projection)) continue;
        auto& slot = slots[{key->layer, static_cast<int>(key->projection)}];
        (key->is_b ? slot.b : slot.a) = &rec;
    }

    std::vector<LoraPair> pairs;
    pairs.reserve(slots.size());
    for (const auto& [lp, slot] : slots) {
        if (!slot.a || !slot.b) {
            const TensorRecord* present = slot.a ? slot.a : slot.b;
            throw Error(ErrorKind::OrphanTensor,
                        "tensor \"" + present->name + "\" has no " +
                            (slot.a ? "lora_B" : "lora_A") + " counterpart");
        }
        LoraPair pair;
        pair.layer_index = lp.first;
        pair.projection = static_cast<Projection>(lp.second);
        pair.A = detail::record_to_matrix(*slot.a);
        pair.B = detail::record_to_matrix(*slot.b);
        if (pair.A.rows() != pair.B.cols())
            throw Error(ErrorKind::RankMismatch,
                        "\"" + slot.a->name + "\" has rank " + std::to_string(pair.A.rows()) +
                            " but \"" + slot.b->name + "\" expects " +
                            std::to_string(pair.B.cols()));
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

}  // namespace lorascan
