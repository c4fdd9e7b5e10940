#include "csavae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "csavae/digest.hpp"
#include "csavae/errors.hpp"

namespace csavae {

static_assert(std::endian::native == std::endian::little,
              "checkpoint tensors are stored as little-endian doubles");

namespace {

constexpr std::string_view kMagic = "CSAVAECK";

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw FormatError("checkpoint: truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::string norm_name(MixNorm n) { return n == MixNorm::layer ? "layer" : "l2"; }

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"n_items", c.n_items},       {"k", c.k},
          {"d", c.d},                   {"hidden", c.hidden},
          {"tau", c.tau},               {"dropout", c.dropout},
          {"use_ffn", c.use_ffn},       {"sinfo_skip", c.sinfo_skip},
          {"mix_norm", norm_name(c.mix_norm)},
          {"use_global", c.use_global}, {"use_local", c.use_local}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_items = j.at("n_items").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.d = j.at("d").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.tau = j.at("tau").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.use_ffn = j.at("use_ffn").get<bool>();
  c.sinfo_skip = j.at("sinfo_skip").get<bool>();
  const auto norm = j.at("mix_norm").get<std::string>();
  if (norm != "layer" && norm != "l2") throw FormatError("unknown mix_norm '" + norm + "'");
  c.mix_norm = norm == "layer" ? MixNorm::layer : MixNorm::l2;
  c.use_global = j.at("use_global").get<bool>();
  c.use_local = j.at("use_local").get<bool>();
  return c;
}

std::string encode_checkpoint(const CsaVae& model, const CheckpointMeta& meta,
                              const std::map<std::string, Matrix>& extra) {
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  for (const auto& p : model.params()) tensors.emplace_back(p.name, &p.value);
  for (const auto& [name, m] : extra) tensors.emplace_back("extra/" + name, &m);
  if (!meta.confounder_range.empty())
    tensors.emplace_back("meta/confounder_range", &meta.confounder_range);

  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, m] : tensors)
    list.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
  nlohmann::json header = {
      {"model", model_config_to_json(model.config())},
      {"weights",
       {{"beta_kl", meta.weights.beta_kl},
        {"lambda_dag", meta.weights.lambda_dag},
        {"lambda_div", meta.weights.lambda_div},
        {"dag_c", meta.weights.dag_c}}},
      {"seed", meta.seed},
      {"train_config", meta.train_config},
      {"item_ids", meta.item_ids},
      {"item_popularity", meta.item_popularity},
      {"training_state", meta.training_state},
      {"tensors", list},
  };
  const std::string h = header.dump();
  std::string out(kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, h.size());
  out += h;
  for (const auto& [name, m] : tensors)
    out.append(reinterpret_cast<const char*>(m->data()), m->size() * sizeof(double));
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) != kMagic) throw FormatError("checkpoint: bad magic");
  std::size_t pos = kMagic.size();
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: version " + std::to_string(version) +
                      " is not supported (this build reads version " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto hlen = get<std::uint64_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw FormatError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  pos += hlen;

  Checkpoint ck;
  try {
    ck.meta.model = model_config_from_json(header.at("model"));
    const auto& w = header.at("weights");
    ck.meta.weights = {w.at("beta_kl").get<double>(), w.at("lambda_dag").get<double>(),
                       w.at("lambda_div").get<double>(), w.at("dag_c").get<double>()};
    ck.meta.seed = header.at("seed").get<std::uint64_t>();
    ck.meta.train_config = header.at("train_config");
    ck.meta.item_ids = header.at("item_ids").get<std::vector<std::string>>();
    ck.meta.item_popularity = header.at("item_popularity").get<std::vector<std::uint64_t>>();
    ck.meta.training_state = header.at("training_state");
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      Matrix m(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
      const std::size_t nbytes = m.size() * sizeof(double);
      if (pos + nbytes > bytes.size()) throw FormatError("checkpoint: truncated tensor " + name);
      std::memcpy(m.data(), bytes.data() + pos, nbytes);
      pos += nbytes;
      if (name.rfind("extra/", 0) == 0)
        ck.extra.emplace(name.substr(6), std::move(m));
      else if (name == "meta/confounder_range")
        ck.meta.confounder_range = std::move(m);
      else
        ck.params.emplace_back(name, std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (pos != bytes.size()) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const CsaVae& model,
                     const CheckpointMeta& meta, const std::map<std::string, Matrix>& extra) {
  const std::string bytes = encode_checkpoint(model, meta, extra);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

void load_parameters(CsaVae& model, const std::vector<std::pair<std::string, Matrix>>& params) {
  auto& dst = model.params();
  if (params.size() != dst.size())
    throw FormatError("checkpoint: " + std::to_string(params.size()) +
                      " tensors, model expects " + std::to_string(dst.size()));
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (params[i].first != dst[i].name || !params[i].second.same_shape(dst[i].value))
      throw FormatError("checkpoint: tensor " + params[i].first + " " +
                        shape_string(params[i].second) + " does not match " + dst[i].name + " " +
                        shape_string(dst[i].value));
    dst[i].value = params[i].second;
  }
}

CsaVae model_from_checkpoint(const Checkpoint& ck) {
  CsaVae model(ck.meta.model, 0);
  load_parameters(model, ck.params);
  return model;
}

std::string parameter_digest(const CsaVae& model) {
  std::string buf;
  for (const auto& p : model.params()) {
    buf += p.name;
    put<std::uint64_t>(buf, p.value.rows());
    put<std::uint64_t>(buf, p.value.cols());
    buf.append(reinterpret_cast<const char*>(p.value.data()), p.value.size() * sizeof(double));
  }
  return sha256_hex(buf);
}

}  // namespace csavae
