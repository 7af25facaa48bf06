#include "ptp/param_store.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "ptp/binary_io.hpp"
#include "ptp/error.hpp"

namespace ptp {

void ParamStore::add(const std::string& name, Tensor value) {
  if (entries_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  Entry e;
  e.grad = Tensor(value.shape());
  e.m = Tensor(value.shape());
  e.v = Tensor(value.shape());
  e.value = std::move(value);
  entries_.emplace(name, std::move(e));
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::size_t ParamStore::num_parameters() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

Tensor& ParamStore::value(const std::string& name) { return entry(name).value; }
const Tensor& ParamStore::value(const std::string& name) const { return entry(name).value; }
Tensor& ParamStore::grad(const std::string& name) { return entry(name).grad; }
const Tensor& ParamStore::grad(const std::string& name) const { return entry(name).grad; }
const Tensor& ParamStore::first_moment(const std::string& name) const { return entry(name).m; }
const Tensor& ParamStore::second_moment(const std::string& name) const { return entry(name).v; }

void ParamStore::zero_grad() {
  for (auto& [_, e] : entries_) e.grad.fill(0.0);
  grads_ready_ = false;
}

void ParamStore::set_grad(const std::string& name, const Tensor& g) {
  Entry& e = entry(name);
  if (g.shape() != e.value.shape()) {
    throw ConfigError("gradient shape " + shape_string(g.shape()) + " does not match " + name +
                      " " + shape_string(e.value.shape()));
  }
  e.grad = g;
  grads_ready_ = true;
}

ParamStore ParamStore::subset(const std::string& prefix) const {
  ParamStore out;
  for (const auto& [name, e] : entries_) {
    if (name.rfind(prefix, 0) == 0) out.add(name, e.value);
  }
  return out;
}

void ParamStore::assign_values(const ParamStore& other) {
  for (const auto& [name, e] : other.entries_) {
    Entry& mine = entry(name);
    if (mine.value.shape() != e.value.shape()) {
      throw ConfigError("shape mismatch assigning parameter " + name);
    }
    mine.value = e.value;
  }
}

void adam_step(ParamStore& store, double lr, double beta1, double beta2, double eps) {
  if (!store.grads_ready_) throw UsageError("adam_step called without populated gradients");
  store.step_ += 1;
  const double t = static_cast<double>(store.step_);
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (auto& [_, e] : store.entries_) {
    double* p = e.value.ptr();
    const double* g = e.grad.ptr();
    double* m = e.m.ptr();
    double* v = e.v.ptr();
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  store.grads_ready_ = false;
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  return clip_grad_norm(std::vector<ParamStore*>{&store}, max_norm);
}

double clip_grad_norm(const std::vector<ParamStore*>& stores, double max_norm) {
  double sq = 0.0;
  for (const ParamStore* store : stores) {
    for (const auto& name : store->names()) {
      for (double g : store->grad(name).data()) sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm");
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (ParamStore* store : stores) {
      for (const auto& name : store->names()) {
        for (double& g : store->grad(name).data()) g *= s;
      }
    }
  }
  return norm;
}

void write_records(std::ostream& os, const std::vector<NamedTensor>& records) {
  io::write_u32(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& rec : records) {
    io::write_u32(os, static_cast<std::uint32_t>(rec.name.size()));
    io::write_bytes(os, rec.name);
    io::write_u32(os, static_cast<std::uint32_t>(rec.value.rank()));
    for (std::size_t e : rec.value.shape()) io::write_u64(os, e);
    for (double v : rec.value.data()) io::write_f64(os, v);
  }
}

std::vector<NamedTensor> read_records(std::istream& is) {
  const std::uint32_t count = io::read_u32(is);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    NamedTensor rec;
    rec.name = io::read_bytes(is, io::read_u32(is));
    const std::uint32_t rank = io::read_u32(is);
    if (rank == 0 || rank > 8) throw IoError("record " + rec.name + ": invalid rank");
    Shape shape(rank);
    for (auto& e : shape) e = io::read_u64(is);
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = io::read_f64(is);
    rec.value = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(rec));
  }
  return out;
}

void save_checkpoint(std::ostream& os, const ParamStore& store, const std::string& metadata) {
  io::write_bytes(os, "PTPL");
  io::write_u32(os, kCheckpointVersion);
  std::vector<NamedTensor> records;
  for (const auto& name : store.names()) records.push_back({name, store.value(name)});
  write_records(os, records);
  io::write_u32(os, static_cast<std::uint32_t>(metadata.size()));
  io::write_bytes(os, metadata);
}

std::string checkpoint_bytes(const ParamStore& store, const std::string& metadata) {
  std::ostringstream os(std::ios::binary);
  save_checkpoint(os, store, metadata);
  return os.str();
}

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& metadata) {
  io::write_file(path, checkpoint_bytes(store, metadata));
}

Checkpoint load_checkpoint(std::istream& is) {
  io::expect_magic(is, "PTPL", "checkpoint");
  const std::uint32_t version = io::read_u32(is);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  for (auto& rec : read_records(is)) ck.params.add(rec.name, std::move(rec.value));
  ck.metadata = io::read_bytes(is, io::read_u32(is));
  return ck;
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  return load_checkpoint(in);
}

void save_training_state(std::ostream& os, const ParamStore& store) {
  io::write_bytes(os, "PTPS");
  io::write_u32(os, kCheckpointVersion);
  io::write_u64(os, store.step_);
  std::vector<NamedTensor> records;
  for (const auto& [name, e] : store.entries_) {
    records.push_back({"value/" + name, e.value});
    records.push_back({"m/" + name, e.m});
    records.push_back({"v/" + name, e.v});
  }
  write_records(os, records);
}

ParamStore load_training_state(std::istream& is) {
  io::expect_magic(is, "PTPS", "training state");
  if (io::read_u32(is) != kCheckpointVersion) throw IoError("unsupported training state version");
  ParamStore store;
  const std::uint64_t step = io::read_u64(is);
  auto records = read_records(is);
  for (auto& rec : records) {
    if (rec.name.rfind("value/", 0) == 0) store.add(rec.name.substr(6), rec.value);
  }
  for (auto& rec : records) {
    if (rec.name.rfind("m/", 0) == 0) store.entry(rec.name.substr(2)).m = rec.value;
    if (rec.name.rfind("v/", 0) == 0) store.entry(rec.name.substr(2)).v = rec.value;
  }
  store.step_ = step;
  return store;
}

}  // namespace ptp
