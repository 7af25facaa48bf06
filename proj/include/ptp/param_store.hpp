#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ptp/tensor.hpp"

namespace ptp {

/// Named parameters with gradients and Adam moments.
///
/// Gradients, first and second moments always exist for exactly the set of
/// parameter names and share each parameter's shape.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  std::vector<std::string> names() const;
  std::size_t num_parameters() const;

  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;
  const Tensor& first_moment(const std::string& name) const;
  const Tensor& second_moment(const std::string& name) const;

  /// Sets every gradient to zero and marks gradients as not yet computed.
  void zero_grad();
  /// Marks gradients as populated (called by Tape::backward).
  void mark_grads_ready() { grads_ready_ = true; }
  bool grads_ready() const noexcept { return grads_ready_; }
  void set_grad(const std::string& name, const Tensor& g);

  std::uint64_t step() const noexcept { return step_; }

  /// Copies the named subset (by prefix) into a new store without moments.
  ParamStore subset(const std::string& prefix) const;
  /// Overwrites values of every parameter present in `other`.
  void assign_values(const ParamStore& other);

  friend void adam_step(ParamStore& store, double lr, double beta1, double beta2, double eps);
  friend void save_training_state(std::ostream& os, const ParamStore& store);
  friend ParamStore load_training_state(std::istream& is);

 private:
  struct Entry {
    Tensor value;
    Tensor grad;
    Tensor m;
    Tensor v;
  };
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::map<std::string, Entry> entries_;
  std::uint64_t step_ = 0;
  bool grads_ready_ = false;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update. Throws UsageError when gradients were not populated.
void adam_step(ParamStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);
inline void adam_step(ParamStore& store, const AdamConfig& cfg) {
  adam_step(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
}

/// Scales all gradients so their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
double clip_grad_norm(ParamStore& store, double max_norm);
/// Same, with one global norm across several stores.
double clip_grad_norm(const std::vector<ParamStore*>& stores, double max_norm);

// Checkpoint format: "PTPL", u32 version, u32 record count, records, then
// u32 metadata length and metadata bytes (JSON or empty).
// Record: u32 name length, name bytes, u32 rank, u64 extents, f64 payload (LE).
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

void write_records(std::ostream& os, const std::vector<NamedTensor>& records);
std::vector<NamedTensor> read_records(std::istream& is);

void save_checkpoint(std::ostream& os, const ParamStore& store, const std::string& metadata = {});
void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& metadata = {});
std::string checkpoint_bytes(const ParamStore& store, const std::string& metadata = {});

struct Checkpoint {
  ParamStore params;
  std::string metadata;
};
Checkpoint load_checkpoint(std::istream& is);
Checkpoint load_checkpoint(const std::string& path);

/// Parameters plus Adam moments and step counter, for resuming training.
void save_training_state(std::ostream& os, const ParamStore& store);
ParamStore load_training_state(std::istream& is);

}  // namespace ptp
