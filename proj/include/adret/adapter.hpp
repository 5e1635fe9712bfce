#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "adret/errors.hpp"
#include "adret/io.hpp"
#include "adret/numerics.hpp"
#include "adret/rng.hpp"

namespace adret {

// Residual key-value adapter. For an input embedding e (dimension d) it
// computes a correction from a learned dictionary of h entries:
//
//   z = K e / temperature        (h attention logits)
//   w = softmax(z)
//   output = e + w V             (residual added to the input)
//
// With V = 0 the adapter is the identity, which is how it is initialized:
// training starts exactly at the unadapted system.
struct AdapterParams {
  std::size_t h = 0;
  std::size_t d = 0;
  double temperature = 1.0;
  std::uint64_t seed = 0;  // seed the keys were drawn from, for provenance
  Mat K;                   // h x d dictionary keys
  Mat V;                   // h x d dictionary values

  bool operator==(const AdapterParams&) const = default;
};

struct AdapterConfig {
  std::size_t h = 64;
  std::size_t d = 0;
  double init_key_scale = 1.0;  // key entries ~ N(0, (scale/sqrt(d))^2)
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

// Identifies a specific parameter value (not just a shape), so stale
// by-products of a forward pass can be detected.
inline std::uint64_t params_fingerprint(const AdapterParams& p) {
  std::uint64_t f = kFnvOffsetBasis;
  f = fnv1a64_accum(f, &p.h, sizeof(p.h));
  f = fnv1a64_accum(f, &p.d, sizeof(p.d));
  f = fnv1a64_accum(f, &p.temperature, sizeof(p.temperature));
  f = fnv1a64_accum(f, p.K.data.data(), p.K.data.size() * sizeof(double));
  f = fnv1a64_accum(f, p.V.data.data(), p.V.data.size() * sizeof(double));
  return f;
}

// Everything the backward pass needs from a forward pass, bound to the
// parameters that produced it.
struct ForwardTape {
  std::uint64_t fingerprint = 0;
  Vec input;    // e
  Vec logits;   // z
  Vec weights;  // w
};

inline AdapterParams init_adapter(const AdapterConfig& cfg) {
  if (cfg.d == 0) throw ConfigError("init_adapter: d must be positive");
  if (cfg.h == 0) throw ConfigError("init_adapter: h must be positive");
  if (cfg.h >= cfg.d)
    throw ConfigError("init_adapter: h (" + std::to_string(cfg.h) +
                      ") must be smaller than d (" + std::to_string(cfg.d) +
                      ")");
  if (!(cfg.temperature > 0.0) || !std::isfinite(cfg.temperature))
    throw ConfigError("init_adapter: temperature must be positive");
  if (!(cfg.init_key_scale > 0.0) || !std::isfinite(cfg.init_key_scale))
    throw ConfigError("init_adapter: init_key_scale must be positive");

  AdapterParams p;
  p.h = cfg.h;
  p.d = cfg.d;
  p.temperature = cfg.temperature;
  p.seed = cfg.seed;
  p.K = Mat(cfg.h, cfg.d);
  p.V = Mat(cfg.h, cfg.d);
  Rng rng(cfg.seed);
  double sigma = cfg.init_key_scale / std::sqrt(static_cast<double>(cfg.d));
  for (double& v : p.K.data) v = rng.gaussian() * sigma;
  return p;
}

// The residual term w V. Fills `tape` when given one.
inline Vec lookup(std::span<const double> e, const AdapterParams& p,
                  ForwardTape* tape = nullptr) {
  if (e.size() != p.d)
    throw ShapeError("lookup: input dimension " + std::to_string(e.size()) +
                     " vs adapter d " + std::to_string(p.d));
  if (!all_finite(e)) throw NumericError("lookup: non-finite input");
  Vec z = matvec(p.K, e);
  for (double& v : z) v /= p.temperature;
  Vec w = softmax_row(z);
  Vec residual = vecmat(w, p.V);
  if (tape) {
    tape->fingerprint = params_fingerprint(p);
    tape->input.assign(e.begin(), e.end());
    tape->logits = z;
    tape->weights = w;
  }
  return residual;
}

inline Vec transform(std::span<const double> e, const AdapterParams& p,
                     ForwardTape* tape = nullptr) {
  Vec out = lookup(e, p, tape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += e[i];
  return out;
}

struct AdapterGrads {
  Mat dK;
  Mat dV;
  Vec d_input;  // gradient flowing back to the input embedding
};

// Reverse-mode gradients of `upstream . transform(e)` with respect to K, V
// and e, replayed from a tape of the forward pass.
inline AdapterGrads transform_grad(const ForwardTape& tape,
                                   const AdapterParams& p,
                                   std::span<const double> upstream) {
  if (tape.fingerprint != params_fingerprint(p))
    throw TapeError(
        "transform_grad: tape was produced by different parameters");
  if (tape.input.size() != p.d || tape.weights.size() != p.h)
    throw TapeError("transform_grad: tape shape does not match parameters");
  if (upstream.size() != p.d)
    throw ShapeError("transform_grad: upstream dimension mismatch");
  if (!all_finite(upstream))
    throw NumericError("transform_grad: non-finite upstream");

  const Vec& w = tape.weights;
  const Vec& e = tape.input;

  AdapterGrads g;
  g.dV = Mat(p.h, p.d);
  for (std::size_t i = 0; i < p.h; ++i)
    for (std::size_t j = 0; j < p.d; ++j) g.dV.at(i, j) = w[i] * upstream[j];

  // Through the softmax: dz_i = w_i (dw_i - sum_j w_j dw_j).
  Vec dw = matvec(p.V, upstream);
  double mix = dot(w, dw);
  Vec dz(p.h);
  for (std::size_t i = 0; i < p.h; ++i) dz[i] = w[i] * (dw[i] - mix);

  g.dK = Mat(p.h, p.d);
  for (std::size_t i = 0; i < p.h; ++i)
    for (std::size_t j = 0; j < p.d; ++j)
      g.dK.at(i, j) = dz[i] * e[j] / p.temperature;

  g.d_input = vecmat(dz, p.K);
  for (double& v : g.d_input) v /= p.temperature;
  for (std::size_t j = 0; j < p.d; ++j) g.d_input[j] += upstream[j];
  return g;
}

// --- checkpoints -----------------------------------------------------------

// Binary layout (all integers and doubles little-endian):
//   magic "ADRCKPT1" | u32 version | u64 h | u64 d | f64 temperature |
//   u64 seed | h*d f64 (K, row-major) | h*d f64 (V) | length-prefixed
//   JSON metadata string.
inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'R', 'C',
                                             'K', 'P', 'T', '1'};

inline void save_adapter(const AdapterParams& p,
                         const std::filesystem::path& path,
                         const nlohmann::json& metadata = nlohmann::json::object()) {
  atomic_write(path, [&](std::ostream& out) {
    out.write(kCheckpointMagic, 8);
    write_le<std::uint32_t>(out, 1);
    write_le<std::uint64_t>(out, p.h);
    write_le<std::uint64_t>(out, p.d);
    write_le<double>(out, p.temperature);
    write_le<std::uint64_t>(out, p.seed);
    for (double v : p.K.data) write_le<double>(out, v);
    for (double v : p.V.data) write_le<double>(out, v);
    write_string(out, metadata.dump());
  });
}

inline AdapterParams load_adapter(const std::filesystem::path& path,
                                  nlohmann::json* metadata = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SerializationError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string_view(magic, 8) != std::string_view(kCheckpointMagic, 8))
    throw SerializationError("not an adapter checkpoint: " + path.string());
  auto version = read_le<std::uint32_t>(in);
  if (version != 1)
    throw SerializationError("unsupported checkpoint version " +
                             std::to_string(version));
  AdapterParams p;
  p.h = read_le<std::uint64_t>(in);
  p.d = read_le<std::uint64_t>(in);
  p.temperature = read_le<double>(in);
  p.seed = read_le<std::uint64_t>(in);
  if (p.h == 0 || p.d == 0 || p.h * p.d > (1ull << 32))
    throw SerializationError("implausible checkpoint shape");
  p.K = Mat(p.h, p.d);
  p.V = Mat(p.h, p.d);
  for (double& v : p.K.data) v = read_le<double>(in);
  for (double& v : p.V.data) v = read_le<double>(in);
  std::string meta = read_string(in);
  try {
    nlohmann::json parsed = nlohmann::json::parse(meta);
    if (metadata) *metadata = std::move(parsed);
  } catch (const nlohmann::json::exception& e) {
    throw SerializationError(std::string("corrupt checkpoint metadata: ") +
                             e.what());
  }
  return p;
}

}  // namespace adret
