#include "permalign/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace permalign {

namespace container {

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("container: truncated file");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw IoError("container: truncated string");
  return s;
}

void write_f32_le(std::ostream& out, const std::vector<float>& v) {
  static_assert(sizeof(float) == 4);
  for (float x : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &x, 4);
    write_u32(out, bits);
  }
}

std::vector<float> read_f32_le(std::istream& in, std::size_t n) {
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = read_u32(in);
    std::memcpy(&v[i], &bits, 4);
  }
  return v;
}

}  // namespace

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (std::uint32_t d : dims) n *= d;
  return n;
}

void save(const std::string& path, const char magic[4], const File& file,
          bool u8_payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(magic, 4);
  write_u32(out, kFormatVersion);
  write_string(out, file.meta_json);
  write_u32(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    write_string(out, t.name);
    write_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (std::uint32_t d : t.dims) write_u32(out, d);
    if (u8_payload) {
      if (t.u8.size() != t.element_count()) {
        throw IoError("container: tensor " + t.name + " payload size mismatch");
      }
      out.write(reinterpret_cast<const char*>(t.u8.data()),
                static_cast<std::streamsize>(t.u8.size()));
    } else {
      if (t.f32.size() != t.element_count()) {
        throw IoError("container: tensor " + t.name + " payload size mismatch");
      }
      write_f32_le(out, t.f32);
    }
  }
  if (!out) throw IoError("write failed: " + path);
}

File load(const std::string& path, const char magic[4], bool u8_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  char got[4];
  in.read(got, 4);
  if (!in || std::memcmp(got, magic, 4) != 0) {
    throw IoError("container: unknown magic in " + path);
  }
  const std::uint32_t version = read_u32(in);
  if (version != kFormatVersion) {
    throw IoError("container: unsupported version " + std::to_string(version));
  }
  File file;
  file.meta_json = read_string(in);
  const std::uint32_t count = read_u32(in);
  file.tensors.resize(count);
  for (auto& t : file.tensors) {
    t.name = read_string(in);
    const std::uint32_t rank = read_u32(in);
    t.dims.resize(rank);
    for (auto& d : t.dims) d = read_u32(in);
    const std::size_t n = t.element_count();
    if (u8_payload) {
      t.u8.resize(n);
      in.read(reinterpret_cast<char*>(t.u8.data()),
              static_cast<std::streamsize>(n));
      if (!in) throw IoError("container: truncated payload in " + path);
    } else {
      t.f32 = read_f32_le(in, n);
    }
  }
  return file;
}

}  // namespace container

namespace {

using nlohmann::json;

json arch_to_json(const ArchitectureSpec& arch) {
  return json{{"input_dim", arch.input_dim},
              {"hidden_dims", arch.hidden_dims},
              {"output_dim", arch.output_dim},
              {"use_layer_norm", arch.use_layer_norm},
              {"activation", "relu"}};
}

ArchitectureSpec arch_from_json(const json& j) {
  ArchitectureSpec arch;
  arch.input_dim = j.at("input_dim").get<int>();
  arch.hidden_dims = j.at("hidden_dims").get<std::vector<int>>();
  arch.output_dim = j.at("output_dim").get<int>();
  arch.use_layer_norm = j.at("use_layer_norm").get<bool>();
  if (j.at("activation").get<std::string>() != "relu") {
    throw IoError("checkpoint: unsupported activation");
  }
  return arch;
}

container::Tensor matrix_tensor(const std::string& name, const Matrix& m) {
  container::Tensor t;
  t.name = name;
  t.dims = {static_cast<std::uint32_t>(m.rows()),
            static_cast<std::uint32_t>(m.cols())};
  t.f32.reserve(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      t.f32.push_back(static_cast<float>(m(r, c)));
    }
  }
  return t;
}

container::Tensor vector_tensor(const std::string& name, const Vector& v) {
  container::Tensor t;
  t.name = name;
  t.dims = {static_cast<std::uint32_t>(v.size())};
  t.f32.reserve(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    t.f32.push_back(static_cast<float>(v[i]));
  }
  return t;
}

Matrix tensor_matrix(const container::Tensor& t) {
  if (t.dims.size() != 2) throw IoError("checkpoint: " + t.name + " not rank 2");
  Matrix m(t.dims[0], t.dims[1]);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.f32[k++];
  }
  return m;
}

Vector tensor_vector(const container::Tensor& t) {
  if (t.dims.size() != 1) throw IoError("checkpoint: " + t.name + " not rank 1");
  Vector v(t.dims[0]);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = t.f32[i];
  return v;
}

const container::Tensor* find_tensor(const std::vector<container::Tensor>& ts,
                                     const std::string& name) {
  for (const auto& t : ts) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

}  // namespace

std::vector<container::Tensor> params_to_tensors(const NetworkParams& params,
                                                 const std::string& prefix) {
  std::vector<container::Tensor> ts;
  const int k = params.arch.num_layers();
  for (int i = 0; i < k; ++i) {
    ts.push_back(matrix_tensor(prefix + param_name(ParamKind::weight, i),
                               params.weights[i]));
    ts.push_back(
        vector_tensor(prefix + param_name(ParamKind::bias, i), params.biases[i]));
    if (params.arch.use_layer_norm && i + 1 < k) {
      ts.push_back(vector_tensor(prefix + param_name(ParamKind::norm_scale, i),
                                 params.norm_scale[i]));
      ts.push_back(vector_tensor(prefix + param_name(ParamKind::norm_shift, i),
                                 params.norm_shift[i]));
    }
  }
  return ts;
}

NetworkParams params_from_tensors(const ArchitectureSpec& arch,
                                  const std::vector<container::Tensor>& tensors,
                                  const std::string& prefix) {
  NetworkParams p = NetworkParams::zeros(arch);
  const int k = arch.num_layers();
  for (int i = 0; i < k; ++i) {
    const auto* w = find_tensor(tensors, prefix + param_name(ParamKind::weight, i));
    const auto* b = find_tensor(tensors, prefix + param_name(ParamKind::bias, i));
    if (!w || !b) throw IoError("checkpoint: missing layer tensor");
    p.weights[i] = tensor_matrix(*w);
    p.biases[i] = tensor_vector(*b);
    if (arch.use_layer_norm && i + 1 < k) {
      const auto* g =
          find_tensor(tensors, prefix + param_name(ParamKind::norm_scale, i));
      const auto* s =
          find_tensor(tensors, prefix + param_name(ParamKind::norm_shift, i));
      if (!g || !s) throw IoError("checkpoint: missing norm tensor");
      p.norm_scale[i] = tensor_vector(*g);
      p.norm_shift[i] = tensor_vector(*s);
    }
  }
  p.validate();
  return p;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  container::File file;
  json meta{{"arch", arch_to_json(ckpt.params.arch)},
            {"epoch", ckpt.epoch},
            {"seed", ckpt.seed},
            {"regime", ckpt.regime},
            {"fingerprint", ckpt.config_fingerprint}};
  file.meta_json = meta.dump();
  file.tensors = params_to_tensors(ckpt.params);
  if (ckpt.momentum) {
    auto vt = params_to_tensors(*ckpt.momentum, "v");
    file.tensors.insert(file.tensors.end(), vt.begin(), vt.end());
  }
  container::save(path, "PMLC", file, /*u8_payload=*/false);
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto file = container::load(path, "PMLC", /*u8_payload=*/false);
  json meta = json::parse(file.meta_json);
  Checkpoint ckpt;
  const ArchitectureSpec arch = arch_from_json(meta.at("arch"));
  ckpt.params = params_from_tensors(arch, file.tensors);
  ckpt.epoch = meta.at("epoch").get<int>();
  ckpt.seed = meta.at("seed").get<std::uint64_t>();
  ckpt.regime = meta.at("regime").get<std::string>();
  if (meta.contains("fingerprint")) {
    ckpt.config_fingerprint = meta.at("fingerprint").get<std::string>();
  }
  if (find_tensor(file.tensors, "vW1") != nullptr) {
    ckpt.momentum = params_from_tensors(arch, file.tensors, "v");
  }
  return ckpt;
}

}  // namespace permalign
