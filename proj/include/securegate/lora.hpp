#pragma once

// Low-rank adapter algebra: init, application, linear fusion into dense
// deltas, and the "SGAD" checkpoint format. An adapter holds one (A, B) pair
// per attachment point; its effective delta at a point is
// (lora_alpha / r) * B * A.

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "securegate/serialize.hpp"
#include "securegate/tensor.hpp"
#include "securegate/tinylm.hpp"

namespace securegate {

enum class Role : std::uint8_t {
  kSecure = 0,
  kRevealing = 1,
  kGlobal = 2,
  kFusedSecure = 3,
  kFusedRevealing = 4,
};

inline const char* role_name(Role r) {
  switch (r) {
    case Role::kSecure: return "secure";
    case Role::kRevealing: return "revealing";
    case Role::kGlobal: return "global";
    case Role::kFusedSecure: return "fused_secure";
    case Role::kFusedRevealing: return "fused_revealing";
  }
  return "?";
}

struct AdapterPoint {
  Tensor A;  // [r, k]
  Tensor B;  // [d, r]
};

struct LowRankAdapter {
  std::string id;
  Role role = Role::kSecure;
  std::size_t rank = 0;
  double lora_alpha = 0.0;  // 4 * rank unless overridden
  double dropout_p = 0.1;
  std::map<std::string, AdapterPoint> points;

  double scale() const { return lora_alpha / static_cast<double>(rank); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, pt] : points) n += pt.A.numel() + pt.B.numel();
    return n;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (auto& [name, pt] : points) {
      fn(pt.A);
      fn(pt.B);
    }
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    for (const auto& [name, pt] : points) {
      fn(pt.A);
      fn(pt.B);
    }
  }
};

struct DenseDelta {
  std::string id;
  Role role = Role::kFusedSecure;
  bool local_only = false;
  std::map<std::string, Tensor> deltas;  // attachment point -> [d, k]
  std::vector<std::pair<std::string, double>> provenance;  // (adapter id, coeff)
};

inline const std::set<std::size_t>& default_ranks() {
  static const std::set<std::size_t> ranks = {4, 8, 12, 16};
  return ranks;
}

// A drawn from N(0, 0.02^2), B zero, so the initial delta vanishes exactly.
inline LowRankAdapter init_adapter(const TinyLM& model, std::size_t r, Role role,
                                   std::uint64_t seed,
                                   bool allow_custom_rank = false) {
  if (r == 0) throw std::invalid_argument("init_adapter: rank must be positive");
  if (!allow_custom_rank && !default_ranks().count(r))
    throw std::invalid_argument("init_adapter: rank " + std::to_string(r) +
                                " outside the default set {4,8,12,16}");
  LowRankAdapter a;
  a.role = role;
  a.rank = r;
  a.lora_alpha = 4.0 * static_cast<double>(r);
  std::size_t idx = 0;
  for (const AttachPoint& pt : model.attachment_points()) {
    if (r > std::min(pt.d, pt.k))
      throw std::invalid_argument("init_adapter: rank " + std::to_string(r) +
                                  " exceeds min(d,k) at " + pt.name);
    Rng rng(derive_seed(seed, "adapter_init", idx++));
    AdapterPoint p;
    p.A = Tensor::randn({r, pt.k}, rng, 0.02);
    p.B = Tensor::zeros({pt.d, r});
    a.points[pt.name] = std::move(p);
  }
  return a;
}

// y = (lora_alpha / r) * (x A^T) B^T with dropout on the x A^T activation
// while training. Rows of x are inputs, so x has k columns.
inline Tensor apply(const LowRankAdapter& a, const std::string& point,
                    const Tensor& x, bool training = false,
                    std::uint64_t seed = 0) {
  auto it = a.points.find(point);
  if (it == a.points.end())
    throw std::invalid_argument("apply: adapter has no point '" + point + "'");
  const AdapterPoint& pt = it->second;
  if (x.rank() != 2 || x.cols() != pt.A.cols())
    throw std::invalid_argument("apply: input " + x.shape_str() +
                                " incompatible with A " + pt.A.shape_str());
  Tensor ax = matmul(x, pt.A, false, true);  // [n, r]
  if (training && a.dropout_p > 0.0) {
    Rng rng(derive_seed(seed, "apply_dropout"));
    const double keep = 1.0 - a.dropout_p;
    for (double& v : ax.data) v = (rng.uniform() < keep) ? v / keep : 0.0;
  }
  Tensor y = matmul(ax, pt.B, false, true);  // [n, d]
  const double s = a.scale();
  for (double& v : y.data) v *= s;
  return y;
}

// Effective dense delta of one adapter: scale * B * A per point.
inline std::map<std::string, Tensor> dense_delta_of(const LowRankAdapter& a,
                                                    std::uint64_t* flops = nullptr) {
  std::map<std::string, Tensor> out;
  const double s = a.scale();
  for (const auto& [name, pt] : a.points) {
    Tensor d = matmul(pt.B, pt.A, false, false, flops);
    for (double& v : d.data) v *= s;
    out[name] = std::move(d);
  }
  return out;
}

// Linear fusion: delta = sum_i coeffs[i] * effective_delta(adapters[i]).
inline DenseDelta fuse(const std::vector<const LowRankAdapter*>& adapters,
                       const std::vector<double>& coeffs,
                       std::uint64_t* flops = nullptr) {
  if (adapters.empty()) throw std::invalid_argument("fuse: empty adapter list");
  if (adapters.size() != coeffs.size())
    throw std::invalid_argument("fuse: " + std::to_string(adapters.size()) +
                                " adapters but " + std::to_string(coeffs.size()) +
                                " coefficients");
  DenseDelta out;
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    const LowRankAdapter& a = *adapters[i];
    auto eff = dense_delta_of(a, flops);
    for (auto& [name, d] : eff) {
      auto it = out.deltas.find(name);
      if (it == out.deltas.end()) {
        if (i != 0)
          throw std::invalid_argument("fuse: attachment points disagree at " + name);
        Tensor t = std::move(d);
        for (double& v : t.data) v *= coeffs[i];
        out.deltas[name] = std::move(t);
      } else {
        if (!it->second.same_shape(d))
          throw std::invalid_argument("fuse: shape mismatch at " + name + ": " +
                                      it->second.shape_str() + " vs " + d.shape_str());
        for (std::size_t j = 0; j < d.numel(); ++j)
          it->second.data[j] += coeffs[i] * d.data[j];
      }
    }
    if (i != 0 && eff.size() != out.deltas.size())
      throw std::invalid_argument("fuse: adapters cover different attachment points");
    out.provenance.emplace_back(a.id, coeffs[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint: magic "SGAD", version u16, role byte, rank u16, then the
// role-dependent payload; tensors are f32.

inline Bytes adapter_to_bytes(const LowRankAdapter& a) {
  ByteWriter w;
  w.magic("SGAD");
  w.u16(1);
  w.u8(static_cast<std::uint8_t>(a.role));
  w.u16(static_cast<std::uint16_t>(a.rank));
  w.str(a.id);
  w.f64(a.lora_alpha);
  w.f64(a.dropout_p);
  w.u32(static_cast<std::uint32_t>(a.points.size()));
  for (const auto& [name, pt] : a.points) {
    w.str(name);
    w.tensor_f32(pt.A);
    w.tensor_f32(pt.B);
  }
  return w.take();
}

inline LowRankAdapter adapter_from_bytes(const Bytes& bytes) {
  ByteReader r(bytes);
  r.expect_magic("SGAD", "adapter checkpoint");
  const std::uint16_t version = r.u16();
  if (version != 1)
    throw std::runtime_error("adapter checkpoint: unsupported version " +
                             std::to_string(version));
  LowRankAdapter a;
  const std::uint8_t role = r.u8();
  if (role > static_cast<std::uint8_t>(Role::kGlobal))
    throw std::runtime_error("adapter checkpoint: role byte " +
                             std::to_string(role) + " is not a low-rank role");
  a.role = static_cast<Role>(role);
  a.rank = r.u16();
  a.id = r.str();
  a.lora_alpha = r.f64();
  a.dropout_p = r.f64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    AdapterPoint pt;
    pt.A = r.tensor_f32();
    pt.B = r.tensor_f32();
    a.points[name] = std::move(pt);
  }
  return a;
}

inline Bytes delta_to_bytes(const DenseDelta& d) {
  ByteWriter w;
  w.magic("SGAD");
  w.u16(1);
  w.u8(static_cast<std::uint8_t>(d.role));
  w.u16(0);  // dense payload carries no rank
  w.str(d.id);
  w.u8(d.local_only ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(d.provenance.size()));
  for (const auto& [id, coeff] : d.provenance) {
    w.str(id);
    w.f64(coeff);
  }
  w.u32(static_cast<std::uint32_t>(d.deltas.size()));
  for (const auto& [name, t] : d.deltas) {
    w.str(name);
    w.tensor_f32(t);
  }
  return w.take();
}

inline DenseDelta delta_from_bytes(const Bytes& bytes) {
  ByteReader r(bytes);
  r.expect_magic("SGAD", "delta checkpoint");
  const std::uint16_t version = r.u16();
  if (version != 1)
    throw std::runtime_error("delta checkpoint: unsupported version " +
                             std::to_string(version));
  DenseDelta d;
  const std::uint8_t role = r.u8();
  if (role < static_cast<std::uint8_t>(Role::kFusedSecure) ||
      role > static_cast<std::uint8_t>(Role::kFusedRevealing))
    throw std::runtime_error("delta checkpoint: role byte " + std::to_string(role) +
                             " is not a fused role");
  d.role = static_cast<Role>(role);
  r.u16();  // rank, unused for dense payloads
  d.id = r.str();
  d.local_only = r.u8() != 0;
  const std::uint32_t nprov = r.u32();
  for (std::uint32_t i = 0; i < nprov; ++i) {
    std::string id = r.str();
    double coeff = r.f64();
    d.provenance.emplace_back(std::move(id), coeff);
  }
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    d.deltas[name] = r.tensor_f32();
  }
  return d;
}

inline void save_adapter(const LowRankAdapter& a, const std::string& path) {
  write_file(path, adapter_to_bytes(a));
}
inline LowRankAdapter load_adapter(const std::string& path) {
  return adapter_from_bytes(read_file(path));
}
inline void save_delta(const DenseDelta& d, const std::string& path) {
  write_file(path, delta_to_bytes(d));
}
inline DenseDelta load_delta(const std::string& path) {
  return delta_from_bytes(read_file(path));
}

}  // namespace securegate
