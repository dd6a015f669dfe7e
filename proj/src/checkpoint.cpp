#include "fsf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fsf {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'F', 'C', 'K', 'P', 'T', '\0'};

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  template <class T>
  void pod(T v) {
    v = to_little(v);
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void matrix(const Matrix& m) {
    pod<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    pod<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) pod<double>(m.data()[i]);
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  template <class T>
  T pod() {
    T v;
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) throw std::runtime_error("checkpoint: truncated file");
    return to_little(v);
  }
  std::string str() {
    auto n = pod<std::uint32_t>();
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (!is_) throw std::runtime_error("checkpoint: truncated file");
    return s;
  }
  Matrix matrix() {
    auto rows = pod<std::uint64_t>();
    auto cols = pod<std::uint64_t>();
    if (rows > (1u << 28) || cols > (1u << 28)) throw std::runtime_error("checkpoint: implausible tensor shape");
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = pod<double>();
    return m;
  }

 private:
  std::istream& is_;
};

using Section = std::map<std::string, Matrix>;

void write_section(Writer& w, const std::string& name, std::uint64_t step, const Section& entries) {
  w.str(name);
  w.pod<std::uint64_t>(step);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [key, m] : entries) {
    w.str(key);
    w.matrix(m);
  }
}

Section params_section(const ParamStore& p) {
  Section s;
  for (const auto& [name, v] : p) s.emplace(name, v.data());
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nlohmann::json header = ckpt.header;
  if (ckpt.ema) header["ema_decay"] = ckpt.ema->decay;
  if (ckpt.adam) {
    header["adam"] = {{"learning_rate", ckpt.adam->learning_rate},
                      {"beta1", ckpt.adam->beta1},
                      {"beta2", ckpt.adam->beta2},
                      {"epsilon", ckpt.adam->epsilon},
                      {"step", ckpt.adam->step}};
  }
  const std::string header_text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp);
    Writer w(os);
    os.write(kMagic, sizeof(kMagic));
    w.pod<std::uint32_t>(kCheckpointVersion);
    w.pod<std::uint64_t>(header_text.size());
    os.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

    std::uint32_t count = 1 + (ckpt.ema ? 1 : 0) + (ckpt.adam ? 2 : 0);
    w.pod<std::uint32_t>(count);
    write_section(w, "params", ckpt.params.step_count(), params_section(ckpt.params));
    if (ckpt.ema) write_section(w, "ema", 0, ckpt.ema->shadow);
    if (ckpt.adam) {
      write_section(w, "adam.m", ckpt.adam->step, ckpt.adam->first_moment);
      write_section(w, "adam.v", ckpt.adam->step, ckpt.adam->second_moment);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  Reader r(is);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto header_len = r.pod<std::uint64_t>();
  std::string header_text(header_len, '\0');
  is.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw std::runtime_error("checkpoint: truncated header");

  Checkpoint ckpt;
  ckpt.header = nlohmann::json::parse(header_text);

  std::map<std::string, std::pair<std::uint64_t, Section>> sections;
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.str();
    auto step = r.pod<std::uint64_t>();
    auto entries = r.pod<std::uint32_t>();
    Section s;
    for (std::uint32_t e = 0; e < entries; ++e) {
      auto key = r.str();
      s.emplace(std::move(key), r.matrix());
    }
    sections.emplace(std::move(name), std::make_pair(step, std::move(s)));
  }

  auto it = sections.find("params");
  if (it == sections.end()) throw std::runtime_error("checkpoint: missing params section");
  for (auto& [name, m] : it->second.second) ckpt.params.add(name, std::move(m));
  ckpt.params.set_step_count(it->second.first);

  if (auto e = sections.find("ema"); e != sections.end()) {
    EmaState ema;
    ema.decay = ckpt.header.value("ema_decay", 0.99995);
    ema.shadow = std::move(e->second.second);
    ckpt.ema = std::move(ema);
  }
  auto m = sections.find("adam.m");
  auto v = sections.find("adam.v");
  if (m != sections.end() && v != sections.end()) {
    AdamState adam;
    const auto& h = ckpt.header.at("adam");
    adam.learning_rate = h.at("learning_rate").get<double>();
    adam.beta1 = h.at("beta1").get<double>();
    adam.beta2 = h.at("beta2").get<double>();
    adam.epsilon = h.at("epsilon").get<double>();
    adam.step = h.at("step").get<std::uint64_t>();
    adam.first_moment = std::move(m->second.second);
    adam.second_moment = std::move(v->second.second);
    ckpt.adam = std::move(adam);
  }
  ckpt.header.erase("ema_decay");
  ckpt.header.erase("adam");
  return ckpt;
}

}  // namespace fsf
