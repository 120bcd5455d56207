#include "demt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace demt {
namespace {

constexpr char kMagic[4] = {'D', 'M', 'T', 'C'};

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
  }
}

void put_u64(std::vector<unsigned char>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
  }
}

struct Cursor {
  const std::vector<unsigned char>& buf;
  const std::string& path;
  size_t off = 0;

  void need(size_t bytes, const char* what) {
    if (off + bytes > buf.size()) {
      throw CheckpointError(path + ": truncated while reading " +
                            std::string(what));
    }
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(buf[off + static_cast<size_t>(i)]) << (8 * i);
    }
    off += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(buf[off + static_cast<size_t>(i)]) << (8 * i);
    }
    off += 8;
    return v;
  }
  std::string str(uint32_t len, const char* what) {
    need(len, what);
    std::string s(reinterpret_cast<const char*>(buf.data()) + off, len);
    off += len;
    return s;
  }
};

Tensor copy_of(const Tensor& t) {
  return Tensor(t.shape(),
                std::vector<double>(t.data().begin(), t.data().end()));
}

void restore_into(const Checkpoint& ckpt, const std::string& name,
                  Tensor target) {
  const Tensor* src = ckpt.find(name);
  if (!src) throw CheckpointError("checkpoint is missing tensor: " + name);
  if (src->shape() != target.shape()) {
    throw CheckpointError("checkpoint tensor " + name + " has shape " +
                          shape_str(src->shape()) + ", model expects " +
                          shape_str(target.shape()));
  }
  std::memcpy(target.mutable_data().data(), src->data().data(),
              static_cast<size_t>(src->size()) * sizeof(double));
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  put_u32(buf, ckpt.version);
  put_u64(buf, ckpt.step);
  put_u32(buf, static_cast<uint32_t>(ckpt.config_text.size()));
  buf.insert(buf.end(), ckpt.config_text.begin(), ckpt.config_text.end());
  put_u32(buf, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(buf, static_cast<uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put_u32(buf, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) put_u64(buf, static_cast<uint64_t>(d));
    for (double v : t.data()) put_u64(buf, std::bit_cast<uint64_t>(v));
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint: " + path);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out.flush()) throw CheckpointError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  Cursor cur{bytes, path};

  cur.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(path + ": not a checkpoint file (bad magic)");
  }
  cur.off = 4;

  Checkpoint ckpt;
  ckpt.version = cur.u32("version");
  if (ckpt.version != kCheckpointVersion) {
    throw CheckpointError(
        path + ": checkpoint version " + std::to_string(ckpt.version) +
        " is unsupported (expected " + std::to_string(kCheckpointVersion) +
        ")");
  }
  ckpt.step = cur.u64("step");
  const uint32_t config_len = cur.u32("config length");
  ckpt.config_text = cur.str(config_len, "config text");

  const uint32_t records = cur.u32("record count");
  ckpt.tensors.reserve(records);
  for (uint32_t r = 0; r < records; ++r) {
    const uint32_t name_len = cur.u32("tensor name length");
    const std::string name = cur.str(name_len, "tensor name");
    const uint32_t rank = cur.u32("tensor rank");
    Shape shape(rank);
    int64_t count = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int64_t>(cur.u64("tensor shape"));
      if (shape[d] < 1) {
        throw CheckpointError(path + ": tensor " + name + " has bad shape");
      }
      count *= shape[d];
    }
    std::vector<double> data(static_cast<size_t>(count));
    for (double& v : data) v = std::bit_cast<double>(cur.u64("tensor data"));
    ckpt.tensors.emplace_back(name, Tensor(shape, std::move(data)));
  }
  if (cur.off != bytes.size()) {
    throw CheckpointError(path + ": trailing bytes after last record");
  }
  return ckpt;
}

Checkpoint snapshot_checkpoint(const Model& model, const SgdOptimizer& opt,
                               uint64_t step, const std::string& config_text) {
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.config_text = config_text;
  for (const auto& [name, t] : model.store.params) {
    ckpt.tensors.emplace_back(name, copy_of(t));
  }
  for (const auto& [name, t] : model.store.state) {
    ckpt.tensors.emplace_back(name, copy_of(t));
  }
  if (opt.params.size() != model.store.params.size()) {
    throw CheckpointError("optimizer does not cover the model parameters");
  }
  for (size_t i = 0; i < opt.velocity.size(); ++i) {
    ckpt.tensors.emplace_back("velocity." + model.store.params[i].first,
                              copy_of(opt.velocity[i]));
  }
  return ckpt;
}

void restore_checkpoint(const Checkpoint& ckpt, Model& model,
                        SgdOptimizer& opt) {
  if (opt.params.size() != model.store.params.size()) {
    throw CheckpointError("optimizer does not cover the model parameters");
  }
  size_t expected = model.store.params.size() * 2 + model.store.state.size();
  if (ckpt.tensors.size() != expected) {
    throw CheckpointError(
        "checkpoint holds " + std::to_string(ckpt.tensors.size()) +
        " tensors, model expects " + std::to_string(expected));
  }
  for (const auto& [name, t] : model.store.params) restore_into(ckpt, name, t);
  for (const auto& [name, t] : model.store.state) restore_into(ckpt, name, t);
  for (size_t i = 0; i < opt.velocity.size(); ++i) {
    restore_into(ckpt, "velocity." + model.store.params[i].first,
                 opt.velocity[i]);
  }
}

}  // namespace demt
