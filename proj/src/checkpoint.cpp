#include "diffdenoise/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "diffdenoise/error.hpp"
#include "diffdenoise/hash.hpp"

namespace diffdenoise {

namespace {

constexpr char kMagic[8] = {'D', 'D', 'N', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

void put_str(std::string& out, std::string_view s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.append(s.data(), s.size());
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v{};
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void get_raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string_view to_string(ModelStage stage) {
  switch (stage) {
    case ModelStage::bsn: return "bsn";
    case ModelStage::diffusion: return "diffusion";
    case ModelStage::distilled: return "distilled";
  }
  return "unknown";
}

std::string TrainedModel::encode() const {
  std::string out(kMagic, 8);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(stage));
  put_str(out, architecture.dump());
  put_str(out, fingerprint);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(loss_history.size()));
  for (double l : loss_history) put<double>(out, l);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(parameters.size()));
  for (const auto& [name, tensor] : parameters) {
    put_str(out, name);
    const auto t = tensor.detach().to(torch::kFloat32).contiguous();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put<std::int64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data_ptr<float>()), static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
  return out;
}

TrainedModel TrainedModel::decode(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("bad checkpoint magic bytes");
  Reader in(bytes);
  char magic[8];
  in.get_raw(magic, 8);
  const auto version = in.get<std::uint32_t>();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  TrainedModel m;
  const auto stage = in.get<std::uint32_t>();
  if (stage < 1 || stage > 3) throw FormatError("unknown checkpoint stage tag");
  m.stage = static_cast<ModelStage>(stage);
  try {
    m.architecture = nlohmann::json::parse(in.get_str());
  } catch (const nlohmann::json::parse_error&) {
    throw FormatError("checkpoint architecture is not valid json");
  }
  m.fingerprint = in.get_str();
  const auto n_loss = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_loss; ++i) m.loss_history.push_back(in.get<double>());
  const auto n_tensors = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = in.get_str();
    const auto ndim = in.get<std::uint32_t>();
    if (ndim > 8) throw FormatError("implausible tensor rank in checkpoint");
    std::vector<std::int64_t> dims(ndim);
    std::int64_t numel = 1;
    for (auto& d : dims) {
      d = in.get<std::int64_t>();
      if (d < 0 || d > (1LL << 28)) throw FormatError("implausible tensor dimension in checkpoint");
      numel *= d;
    }
    auto t = torch::empty(dims, torch::kFloat32);
    in.get_raw(t.data_ptr<float>(), static_cast<std::size_t>(numel) * sizeof(float));
    m.parameters.emplace_back(std::move(name), std::move(t));
  }
  if (!in.done()) throw FormatError("checkpoint has trailing bytes");
  return m;
}

void TrainedModel::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  const auto bytes = encode();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

TrainedModel TrainedModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode(ss.str());
}

std::string TrainedModel::content_hash() const { return sha256_hex(encode()); }

std::vector<std::pair<std::string, torch::Tensor>> capture_state(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : module.named_parameters(true)) {
    out.emplace_back("param:" + item.key(), item.value().detach().to(torch::kFloat32).contiguous().clone());
  }
  for (const auto& item : module.named_buffers(true)) {
    out.emplace_back("buffer:" + item.key(), item.value().detach().to(torch::kFloat32).contiguous().clone());
  }
  return out;
}

void restore_state(torch::nn::Module& module, const std::vector<std::pair<std::string, torch::Tensor>>& state) {
  std::map<std::string, torch::Tensor> by_name(state.begin(), state.end());
  torch::NoGradGuard no_grad;
  std::size_t used = 0;
  auto assign = [&](const std::string& key, torch::Tensor& target) {
    auto it = by_name.find(key);
    if (it == by_name.end()) throw FormatError("checkpoint missing tensor " + key);
    if (it->second.sizes() != target.sizes()) throw FormatError("checkpoint shape mismatch for " + key);
    target.copy_(it->second.to(target.dtype()));
    ++used;
  };
  for (auto& item : module.named_parameters(true)) assign("param:" + item.key(), item.value());
  for (auto& item : module.named_buffers(true)) assign("buffer:" + item.key(), item.value());
  if (used != state.size()) throw FormatError("checkpoint has tensors the network does not");
}

}  // namespace diffdenoise
