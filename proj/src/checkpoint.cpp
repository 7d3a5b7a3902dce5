#include "nemelast/checkpoint.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <sstream>
#include <stdexcept>

namespace nemelast {

namespace {

[[noreturn]] void fail(const std::string& what) {
  throw std::runtime_error("checkpoint: " + what);
}

constexpr uint8_t kDtypeF64 = 1;
constexpr uint8_t kDtypeI64 = 2;

struct TensorEntry {
  std::string name;
  uint8_t dtype;
  Shape shape;
  std::vector<double> f64;
  std::vector<int64_t> i64;
};

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

class HeaderMap {
 public:
  void put(const std::string& key, const std::string& value) { kv_[key] = value; }
  void put_int(const std::string& key, int64_t v) { kv_[key] = std::to_string(v); }
  void put_double(const std::string& key, double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    kv_[key] = buf;
  }
  const std::string& get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) fail("header key '" + key + "' missing");
    return it->second;
  }
  int64_t get_int(const std::string& key) const { return std::stoll(get(key)); }
  double get_double(const std::string& key) const { return std::stod(get(key)); }
  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string serialize(const std::vector<std::string>& order) const {
    std::string out;
    for (const std::string& k : order) out += k + " = " + kv_.at(k) + "\n";
    return out;
  }
  std::vector<std::string> keys_in_insertion() const {
    std::vector<std::string> out;
    for (auto& [k, v] : kv_) out.push_back(k);
    return out;
  }
  static HeaderMap parse(const std::string& text) {
    HeaderMap h;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
      if (line.empty()) continue;
      const size_t sep = line.find(" = ");
      if (sep == std::string::npos) fail("malformed header line '" + line + "'");
      h.kv_[line.substr(0, sep)] = line.substr(sep + 3);
    }
    return h;
  }

 private:
  std::map<std::string, std::string> kv_;
};

void write_exact(FILE* f, const void* p, size_t bytes) {
  if (std::fwrite(p, 1, bytes, f) != bytes) fail("short write");
}

void read_exact(FILE* f, void* p, size_t bytes) {
  if (std::fread(p, 1, bytes, f) != bytes) fail("truncated file");
}

void add_f64(std::vector<TensorEntry>& out, const std::string& name, const Tensor& t) {
  TensorEntry e;
  e.name = name;
  e.dtype = kDtypeF64;
  e.shape = t.shape();
  e.f64.assign(t.data().begin(), t.data().end());
  out.push_back(std::move(e));
}

void add_i64(std::vector<TensorEntry>& out, const std::string& name,
             const std::vector<int>& v) {
  TensorEntry e;
  e.name = name;
  e.dtype = kDtypeI64;
  e.shape = {static_cast<int>(v.size())};
  e.i64.assign(v.begin(), v.end());
  out.push_back(std::move(e));
}

void add_scores(std::vector<TensorEntry>& out, const std::string& name,
                const std::vector<double>& v) {
  TensorEntry e;
  e.name = name;
  e.dtype = kDtypeF64;
  e.shape = {static_cast<int>(v.size())};
  e.f64 = v;
  out.push_back(std::move(e));
}

std::vector<TensorEntry> ranking_entries(const ImportanceRanking& rk, const ModelConfig& cfg) {
  std::vector<TensorEntry> out;
  add_i64(out, "rank.sigma_emb", rk.sigma_emb);
  add_i64(out, "rank.sigma_depth", rk.sigma_depth);
  add_scores(out, "rank.score_emb", rk.score_emb);
  add_scores(out, "rank.score_depth", rk.score_depth);
  for (int j = 0; j < cfg.n_layers; ++j) {
    const std::string suffix = "." + std::to_string(j);
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::FFN:
        add_i64(out, "rank.sigma_ffn" + suffix, rk.sigma_ffn[static_cast<size_t>(j)]);
        add_scores(out, "rank.score_ffn" + suffix, rk.score_ffn[static_cast<size_t>(j)]);
        break;
      case LayerKind::MAMBA:
        add_i64(out, "rank.sigma_mamba_ch" + suffix, rk.sigma_mamba_ch[static_cast<size_t>(j)]);
        add_i64(out, "rank.sigma_mamba_head" + suffix,
                rk.sigma_mamba_head[static_cast<size_t>(j)]);
        add_scores(out, "rank.score_mamba_ch" + suffix,
                   rk.score_mamba_ch[static_cast<size_t>(j)]);
        add_scores(out, "rank.score_mamba_head" + suffix,
                   rk.score_mamba_head[static_cast<size_t>(j)]);
        break;
      case LayerKind::ATTN:
        add_i64(out, "rank.sigma_attn" + suffix, rk.sigma_attn[static_cast<size_t>(j)]);
        add_scores(out, "rank.score_attn" + suffix, rk.score_attn[static_cast<size_t>(j)]);
        break;
    }
  }
  return out;
}

void write_file(const std::string& path, const HeaderMap& header,
                const std::vector<std::string>& header_order,
                const std::vector<TensorEntry>& tensors) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail("cannot open " + path + " for writing");
  const std::string htext = header.serialize(header_order);
  const uint32_t hlen = static_cast<uint32_t>(htext.size());
  write_exact(f, &hlen, sizeof hlen);
  write_exact(f, htext.data(), htext.size());
  const uint32_t count = static_cast<uint32_t>(tensors.size());
  write_exact(f, &count, sizeof count);
  uint64_t offset = 0;
  for (const TensorEntry& e : tensors) {
    const uint16_t nlen = static_cast<uint16_t>(e.name.size());
    write_exact(f, &nlen, sizeof nlen);
    write_exact(f, e.name.data(), e.name.size());
    write_exact(f, &e.dtype, 1);
    const uint8_t rank = static_cast<uint8_t>(e.shape.size());
    write_exact(f, &rank, 1);
    for (int d : e.shape) {
      const uint64_t ext = static_cast<uint64_t>(d);
      write_exact(f, &ext, sizeof ext);
    }
    write_exact(f, &offset, sizeof offset);
    offset += 8ULL * (e.dtype == kDtypeF64 ? e.f64.size() : e.i64.size());
  }
  for (const TensorEntry& e : tensors) {
    if (e.dtype == kDtypeF64)
      write_exact(f, e.f64.data(), e.f64.size() * 8);
    else
      write_exact(f, e.i64.data(), e.i64.size() * 8);
  }
  std::fclose(f);
}

std::pair<HeaderMap, std::vector<TensorEntry>> read_file(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail("cannot open " + path);
  struct Closer {
    FILE* f;
    ~Closer() { std::fclose(f); }
  } closer{f};
  uint32_t hlen = 0;
  read_exact(f, &hlen, sizeof hlen);
  std::string htext(hlen, '\0');
  read_exact(f, htext.data(), hlen);
  HeaderMap header = HeaderMap::parse(htext);
  const std::string& version = header.get("format");
  if (version != kCheckpointFormat)
    fail(std::string("format version mismatch: file has '") + version + "', reader expects '" +
         kCheckpointFormat + "'");
  uint32_t count = 0;
  read_exact(f, &count, sizeof count);
  std::vector<TensorEntry> tensors(count);
  std::vector<uint64_t> offsets(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t nlen = 0;
    read_exact(f, &nlen, sizeof nlen);
    tensors[i].name.resize(nlen);
    read_exact(f, tensors[i].name.data(), nlen);
    read_exact(f, &tensors[i].dtype, 1);
    uint8_t rank = 0;
    read_exact(f, &rank, 1);
    tensors[i].shape.resize(rank);
    for (uint8_t d = 0; d < rank; ++d) {
      uint64_t ext = 0;
      read_exact(f, &ext, sizeof ext);
      tensors[i].shape[d] = static_cast<int>(ext);
    }
    read_exact(f, &offsets[i], sizeof offsets[i]);
  }
  for (uint32_t i = 0; i < count; ++i) {
    const int64_t n = shape_numel(tensors[i].shape);
    if (tensors[i].dtype == kDtypeF64) {
      tensors[i].f64.resize(static_cast<size_t>(n));
      read_exact(f, tensors[i].f64.data(), static_cast<size_t>(n) * 8);
    } else if (tensors[i].dtype == kDtypeI64) {
      tensors[i].i64.resize(static_cast<size_t>(n));
      read_exact(f, tensors[i].i64.data(), static_cast<size_t>(n) * 8);
    } else {
      fail("unknown dtype code " + std::to_string(tensors[i].dtype));
    }
  }
  return {std::move(header), std::move(tensors)};
}

void header_model_config(HeaderMap& h, const ModelConfig& cfg) {
  h.put_int("model.d_e", cfg.d_e);
  h.put_int("model.d_int", cfg.d_int);
  h.put_int("model.n_h", cfg.n_h);
  h.put_int("model.d_h", cfg.d_h);
  h.put_int("model.m_h", cfg.m_h);
  h.put_int("model.m_d", cfg.m_d);
  h.put_int("model.g", cfg.g);
  h.put_int("model.d_s", cfg.d_s);
  h.put_int("model.n_layers", cfg.n_layers);
  h.put("model.pattern", cfg.pattern_str());
  h.put_int("model.vocab", cfg.vocab);
  h.put_int("model.conv_kernel", cfg.conv_kernel);
  h.put_double("model.attn_scale", cfg.attn_scale);
}

ModelConfig parse_model_config(const HeaderMap& h) {
  ModelConfig cfg;
  cfg.d_e = static_cast<int>(h.get_int("model.d_e"));
  cfg.d_int = static_cast<int>(h.get_int("model.d_int"));
  cfg.n_h = static_cast<int>(h.get_int("model.n_h"));
  cfg.d_h = static_cast<int>(h.get_int("model.d_h"));
  cfg.m_h = static_cast<int>(h.get_int("model.m_h"));
  cfg.m_d = static_cast<int>(h.get_int("model.m_d"));
  cfg.g = static_cast<int>(h.get_int("model.g"));
  cfg.d_s = static_cast<int>(h.get_int("model.d_s"));
  cfg.n_layers = static_cast<int>(h.get_int("model.n_layers"));
  cfg.vocab = static_cast<int>(h.get_int("model.vocab"));
  cfg.conv_kernel = static_cast<int>(h.get_int("model.conv_kernel"));
  cfg.attn_scale = h.get_double("model.attn_scale");
  for (char c : h.get("model.pattern")) cfg.pattern.push_back(layer_kind_from_char(c));
  cfg.validate();
  return cfg;
}

const char* mode_name(AxisMode m) {
  return m == AxisMode::HETEROGENEOUS ? "heterogeneous" : "homogeneous";
}

AxisMode parse_mode(const std::string& s) {
  if (s == "heterogeneous") return AxisMode::HETEROGENEOUS;
  if (s == "homogeneous") return AxisMode::HOMOGENEOUS;
  fail("unknown axis mode '" + s + "'");
}

}  // namespace

void save_checkpoint(const HybridModel& model, const RouterBank& bank,
                     const std::vector<BudgetSpec>& budgets, const ImportanceRanking& rankings,
                     const std::string& path) {
  const ModelConfig& cfg = model.config;
  rankings.validate(cfg);
  const double overhead = static_cast<double>(bank.parameter_count()) /
                          static_cast<double>(model.parameter_count());
  if (!(overhead < 0.02))
    fail("router overhead " + std::to_string(overhead) +
         " violates the < 0.02 bound on model size");

  HeaderMap h;
  std::vector<std::string> order;
  auto put = [&](const std::string& k, const std::string& v) {
    h.put(k, v);
    order.push_back(k);
  };
  put("format", kCheckpointFormat);
  header_model_config(h, cfg);
  for (const char* k :
       {"model.d_e", "model.d_int", "model.n_h", "model.d_h", "model.m_h", "model.m_d",
        "model.g", "model.d_s", "model.n_layers", "model.pattern", "model.vocab",
        "model.conv_kernel", "model.attn_scale"})
    order.push_back(k);
  h.put_int("router.n_targets", bank.n_targets);
  order.push_back("router.n_targets");
  h.put_int("router.d_router", bank.d_router);
  order.push_back("router.d_router");
  h.put_double("router.tau", bank.tau);
  order.push_back("router.tau");
  h.put_double("router.logit_scale", bank.logit_scale);
  order.push_back("router.logit_scale");
  put("router.mode.mamba", mode_name(bank.axes[1].mode));
  put("router.mode.attn", mode_name(bank.axes[2].mode));
  put("router.mode.ffn", mode_name(bank.axes[3].mode));
  put("router.set.emb", join_ints(bank.sets.emb_counts));
  {
    std::vector<int> heads, chans;
    for (const MambaChoice& c : bank.sets.mamba) {
      heads.push_back(c.heads);
      chans.push_back(c.channels);
    }
    put("router.set.mamba_heads", join_ints(heads));
    put("router.set.mamba_ch", join_ints(chans));
  }
  put("router.set.attn", join_ints(bank.sets.attn_counts));
  put("router.set.ffn", join_ints(bank.sets.ffn_counts));
  h.put_double("router_overhead", overhead);
  order.push_back("router_overhead");
  h.put_int("budget.count", static_cast<int64_t>(budgets.size()));
  order.push_back("budget.count");
  for (size_t i = 0; i < budgets.size(); ++i) {
    const std::string p = "budget." + std::to_string(i) + ".";
    h.put_int(p + "id", budgets[i].id);
    order.push_back(p + "id");
    put(p + "label", budgets[i].label);
    h.put_double(p + "target_cost", budgets[i].target_cost);
    order.push_back(p + "target_cost");
  }

  std::vector<TensorEntry> tensors;
  for (auto& [name, t] : model.named_parameters()) add_f64(tensors, name, t);
  for (auto& [name, t] : bank.named_parameters()) add_f64(tensors, name, t);
  for (TensorEntry& e : ranking_entries(rankings, cfg)) tensors.push_back(std::move(e));
  write_file(path, h, order, tensors);
}

Checkpoint load_checkpoint(const std::string& path) {
  auto [header, entries] = read_file(path);
  Checkpoint out;
  const ModelConfig cfg = parse_model_config(header);

  std::map<std::string, TensorEntry*> by_name;
  for (TensorEntry& e : entries) {
    if (by_name.count(e.name)) fail("duplicate tensor '" + e.name + "'");
    by_name[e.name] = &e;
  }
  auto take_f64 = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail("tensor '" + name + "' missing from inventory");
    if (it->second->dtype != kDtypeF64) fail("tensor '" + name + "' has wrong dtype");
    Tensor t = Tensor::of(it->second->shape, it->second->f64);
    by_name.erase(it);
    return t;
  };
  auto take_i64 = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail("tensor '" + name + "' missing from inventory");
    std::vector<int> v(it->second->i64.begin(), it->second->i64.end());
    by_name.erase(it);
    return v;
  };
  auto take_scores = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail("tensor '" + name + "' missing from inventory");
    std::vector<double> v = it->second->f64;
    by_name.erase(it);
    return v;
  };

  // model: template from config, then slot tensors by name with shape checks
  out.model = HybridModel::init(cfg, 0);
  for (auto& [name, t] : out.model.named_parameters()) {
    Tensor loaded = take_f64(name);
    if (loaded.shape() != t.shape())
      fail("tensor '" + name + "' shape " + shape_str(loaded.shape()) + " != expected " +
           shape_str(t.shape()));
    Tensor dst = t;
    auto src = loaded.data();
    auto d = dst.data();
    for (size_t i = 0; i < d.size(); ++i) d[i] = src[i];
  }

  AxisConfig sets;
  sets.emb_counts = split_ints(header.get("router.set.emb"));
  sets.attn_counts = split_ints(header.get("router.set.attn"));
  sets.ffn_counts = split_ints(header.get("router.set.ffn"));
  sets.mamba.clear();
  {
    std::vector<int> heads = split_ints(header.get("router.set.mamba_heads"));
    std::vector<int> chans = split_ints(header.get("router.set.mamba_ch"));
    if (heads.size() != chans.size()) fail("mamba set size mismatch");
    for (size_t i = 0; i < heads.size(); ++i) sets.mamba.push_back({heads[i], chans[i]});
  }
  out.bank = RouterBank::init(cfg, sets, static_cast<int>(header.get_int("router.n_targets")),
                              static_cast<int>(header.get_int("router.d_router")), 0,
                              parse_mode(header.get("router.mode.mamba")),
                              parse_mode(header.get("router.mode.attn")),
                              parse_mode(header.get("router.mode.ffn")));
  out.bank.tau = header.get_double("router.tau");
  out.bank.logit_scale = header.get_double("router.logit_scale");
  for (auto& [name, t] : out.bank.named_parameters()) {
    Tensor loaded = take_f64(name);
    if (loaded.shape() != t.shape()) fail("tensor '" + name + "' has unexpected shape");
    Tensor dst = t;
    auto src = loaded.data();
    auto d = dst.data();
    for (size_t i = 0; i < d.size(); ++i) d[i] = src[i];
  }

  out.rankings = ImportanceRanking::identity(cfg);
  out.rankings.sigma_emb = take_i64("rank.sigma_emb");
  out.rankings.sigma_depth = take_i64("rank.sigma_depth");
  out.rankings.score_emb = take_scores("rank.score_emb");
  out.rankings.score_depth = take_scores("rank.score_depth");
  for (int j = 0; j < cfg.n_layers; ++j) {
    const std::string suffix = "." + std::to_string(j);
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::FFN:
        out.rankings.sigma_ffn[static_cast<size_t>(j)] = take_i64("rank.sigma_ffn" + suffix);
        out.rankings.score_ffn[static_cast<size_t>(j)] = take_scores("rank.score_ffn" + suffix);
        break;
      case LayerKind::MAMBA:
        out.rankings.sigma_mamba_ch[static_cast<size_t>(j)] =
            take_i64("rank.sigma_mamba_ch" + suffix);
        out.rankings.sigma_mamba_head[static_cast<size_t>(j)] =
            take_i64("rank.sigma_mamba_head" + suffix);
        out.rankings.score_mamba_ch[static_cast<size_t>(j)] =
            take_scores("rank.score_mamba_ch" + suffix);
        out.rankings.score_mamba_head[static_cast<size_t>(j)] =
            take_scores("rank.score_mamba_head" + suffix);
        break;
      case LayerKind::ATTN:
        out.rankings.sigma_attn[static_cast<size_t>(j)] = take_i64("rank.sigma_attn" + suffix);
        out.rankings.score_attn[static_cast<size_t>(j)] =
            take_scores("rank.score_attn" + suffix);
        break;
    }
  }
  out.rankings.validate(cfg);
  if (!by_name.empty()) fail("unexpected tensor '" + by_name.begin()->first + "' in file");

  const int64_t n_budgets = header.get_int("budget.count");
  for (int64_t i = 0; i < n_budgets; ++i) {
    const std::string p = "budget." + std::to_string(i) + ".";
    BudgetSpec b;
    b.id = static_cast<int>(header.get_int(p + "id"));
    b.label = header.get(p + "label");
    b.target_cost = header.get_double(p + "target_cost");
    out.budgets.push_back(b);
  }
  out.router_overhead = header.get_double("router_overhead");
  return out;
}

namespace {

const BudgetSpec& find_budget(const Checkpoint& ckpt, const std::string& label) {
  for (const BudgetSpec& b : ckpt.budgets)
    if (b.label == label) return b;
  std::string known;
  for (const BudgetSpec& b : ckpt.budgets) known += (known.empty() ? "" : ", ") + b.label;
  fail("budget '" + label + "' is not in the trained budget table {" + known + "}");
}

Tensor slice_2d(const Tensor& src, const std::vector<int>& rows, const std::vector<int>& cols) {
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), static_cast<int>(cols.size())});
  const int src_cols = src.dim(1);
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < cols.size(); ++c)
      out.data()[r * cols.size() + c] =
          src.data()[static_cast<size_t>(rows[r]) * src_cols + cols[c]];
  return out;
}

Tensor slice_1d(const Tensor& src, const std::vector<int>& idx) {
  Tensor out = Tensor::zeros({static_cast<int>(idx.size())});
  for (size_t i = 0; i < idx.size(); ++i) out.data()[i] = src.data()[static_cast<size_t>(idx[i])];
  return out;
}

std::vector<int> iota_n(int n) {
  std::vector<int> v(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
  return v;
}

}  // namespace

SlicedModel extract_submodel(const Checkpoint& ckpt, const std::string& budget_label) {
  const BudgetSpec& budget = find_budget(ckpt, budget_label);
  const ModelConfig& cfg = ckpt.model.config;

  std::vector<Selection> sels = decode_nested(ckpt.bank, ckpt.rankings, ckpt.budgets);
  Selection sel;
  for (size_t i = 0; i < ckpt.budgets.size(); ++i)
    if (ckpt.budgets[i].label == budget.label) sel = sels[i];
  if (sel.heterogeneous())
    fail("budget '" + budget_label + "' decodes to a heterogeneous selection; only "
         "homogeneous selections can be sliced to a single config");

  // retained index lists, in rank order (identity after re-sorting)
  std::vector<int> emb_idx;
  for (int r = 0; r < sel.emb; ++r) emb_idx.push_back(ckpt.rankings.sigma_emb[static_cast<size_t>(r)]);
  const int hpg = cfg.heads_per_group();

  ModelConfig sub = cfg;
  sub.d_e = sel.emb;
  sub.d_int = sel.ffn;
  sub.n_h = sel.attn_heads;
  sub.d_h = sel.attn_head_dim;
  sub.m_h = sel.mamba_heads;
  sub.m_d = sel.mamba_ch;
  sub.n_layers = sel.depth;
  sub.pattern.clear();
  for (int j = 0; j < cfg.n_layers; ++j)
    if (sel.active_layers[static_cast<size_t>(j)]) sub.pattern.push_back(cfg.pattern[static_cast<size_t>(j)]);
  sub.validate();

  SlicedModel out;
  out.selection = sel;
  out.model.config = sub;
  out.model.embedding = slice_2d(ckpt.model.embedding, iota_n(cfg.vocab), emb_idx);
  out.model.lm_head = slice_2d(ckpt.model.lm_head, iota_n(cfg.vocab), emb_idx);
  out.model.final_ln_g = slice_1d(ckpt.model.final_ln_g, emb_idx);
  out.model.final_ln_b = slice_1d(ckpt.model.final_ln_b, emb_idx);

  for (int j = 0; j < cfg.n_layers; ++j) {
    if (!sel.active_layers[static_cast<size_t>(j)]) continue;
    const Layer& L = ckpt.model.layers[static_cast<size_t>(j)];
    Layer sliced;
    sliced.kind = L.kind;
    switch (L.kind) {
      case LayerKind::MAMBA: {
        const auto& sig_h = ckpt.rankings.sigma_mamba_head[static_cast<size_t>(j)];
        const auto& sig_c = ckpt.rankings.sigma_mamba_ch[static_cast<size_t>(j)];
        std::vector<int> heads, chans, inner;
        const int per_group = sel.mamba_heads / cfg.g;
        for (int grp = 0; grp < cfg.g; ++grp)
          for (int r = 0; r < per_group; ++r)
            heads.push_back(sig_h[static_cast<size_t>(grp * hpg + r)]);
        for (int r = 0; r < sel.mamba_ch; ++r) chans.push_back(sig_c[static_cast<size_t>(r)]);
        for (int h : heads)
          for (int c : chans) inner.push_back(h * cfg.m_d + c);
        const MambaLayer& M = L.mamba;
        MambaLayer& S = sliced.mamba;
        S.ln_g = slice_1d(M.ln_g, emb_idx);
        S.ln_b = slice_1d(M.ln_b, emb_idx);
        S.w_z = slice_2d(M.w_z, inner, emb_idx);
        S.w_x = slice_2d(M.w_x, inner, emb_idx);
        S.w_b = slice_2d(M.w_b, iota_n(cfg.g * cfg.d_s), emb_idx);
        S.w_c = slice_2d(M.w_c, iota_n(cfg.g * cfg.d_s), emb_idx);
        S.w_dt = slice_2d(M.w_dt, heads, emb_idx);
        S.a_log = slice_1d(M.a_log, heads);
        S.d = slice_1d(M.d, heads);
        S.conv_x = slice_2d(M.conv_x, inner, iota_n(cfg.conv_kernel));
        S.conv_b = slice_2d(M.conv_b, iota_n(cfg.g * cfg.d_s), iota_n(cfg.conv_kernel));
        S.conv_c = slice_2d(M.conv_c, iota_n(cfg.g * cfg.d_s), iota_n(cfg.conv_kernel));
        S.rms_w = slice_1d(M.rms_w, inner);
        S.w_o = slice_2d(M.w_o, emb_idx, inner);
        break;
      }
      case LayerKind::ATTN: {
        const auto& sig = ckpt.rankings.sigma_attn[static_cast<size_t>(j)];
        std::vector<int> inner;
        for (int r = 0; r < sel.attn_heads; ++r)
          for (int c = 0; c < sel.attn_head_dim; ++c)
            inner.push_back(sig[static_cast<size_t>(r)] * cfg.d_h + c);
        const AttnLayer& A = L.attn;
        AttnLayer& S = sliced.attn;
        S.ln_g = slice_1d(A.ln_g, emb_idx);
        S.ln_b = slice_1d(A.ln_b, emb_idx);
        S.w_q = slice_2d(A.w_q, inner, emb_idx);
        S.w_k = slice_2d(A.w_k, inner, emb_idx);
        S.w_v = slice_2d(A.w_v, inner, emb_idx);
        S.w_o = slice_2d(A.w_o, emb_idx, inner);
        break;
      }
      case LayerKind::FFN: {
        const auto& sig = ckpt.rankings.sigma_ffn[static_cast<size_t>(j)];
        std::vector<int> neurons;
        for (int r = 0; r < sel.ffn; ++r) neurons.push_back(sig[static_cast<size_t>(r)]);
        const FfnLayer& F = L.ffn;
        FfnLayer& S = sliced.ffn;
        S.ln_g = slice_1d(F.ln_g, emb_idx);
        S.ln_b = slice_1d(F.ln_b, emb_idx);
        S.w1 = slice_2d(F.w1, neurons, emb_idx);
        S.w2 = slice_2d(F.w2, emb_idx, neurons);
        break;
      }
    }
    out.model.layers.push_back(std::move(sliced));
  }
  return out;
}

EquivalenceReport verify_equivalence(const Checkpoint& ckpt, const std::string& budget_label,
                                     int n_prompts, int prompt_len, uint64_t seed,
                                     double threshold) {
  find_budget(ckpt, budget_label);
  SlicedModel sliced = extract_submodel(ckpt, budget_label);
  MaskSet masks = MaskSet::from_selection(ckpt.model.config, sliced.selection);
  MaskSet ones = MaskSet::all_ones(sliced.model.config);

  Rng rng = Rng::fork(seed, 0x7072);
  EquivalenceReport report;
  report.threshold = threshold;
  for (int p = 0; p < n_prompts; ++p) {
    std::vector<int32_t> toks(static_cast<size_t>(prompt_len));
    for (int32_t& t : toks) t = rng.uniform_int(ckpt.model.config.vocab);
    Tensor masked = stack_forward(ckpt.model, masks, toks, 1, prompt_len);
    Tensor direct = stack_forward(sliced.model, ones, toks, 1, prompt_len);
    double scale_ref = 0.0;
    for (double v : direct.data()) scale_ref = std::max(scale_ref, std::abs(v));
    double mx = 0.0;
    for (int64_t i = 0; i < masked.size(); ++i)
      mx = std::max(mx, std::abs(masked.data()[i] - direct.data()[i]));
    report.max_rel_diff = std::max(report.max_rel_diff, mx / (scale_ref + 1e-30));
  }
  report.pass = report.max_rel_diff < threshold;
  return report;
}

void save_rankings(const ImportanceRanking& rankings, const ModelConfig& cfg,
                   const std::string& path) {
  rankings.validate(cfg);
  HeaderMap h;
  std::vector<std::string> order;
  h.put("format", kCheckpointFormat);
  order.push_back("format");
  h.put("payload", "rankings");
  order.push_back("payload");
  h.put("model.pattern", cfg.pattern_str());
  order.push_back("model.pattern");
  write_file(path, h, order, ranking_entries(rankings, cfg));
}

ImportanceRanking load_rankings(const ModelConfig& cfg, const std::string& path) {
  auto [header, entries] = read_file(path);
  if (header.get("payload") != "rankings") fail("file " + path + " is not a rankings file");
  if (header.get("model.pattern") != cfg.pattern_str())
    fail("rankings pattern '" + header.get("model.pattern") + "' does not match config '" +
         cfg.pattern_str() + "'");
  std::map<std::string, const TensorEntry*> by_name;
  for (const TensorEntry& e : entries) by_name[e.name] = &e;
  auto get_i = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail("rankings entry '" + name + "' missing");
    return std::vector<int>(it->second->i64.begin(), it->second->i64.end());
  };
  auto get_s = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail("rankings entry '" + name + "' missing");
    return it->second->f64;
  };
  ImportanceRanking rk = ImportanceRanking::identity(cfg);
  rk.sigma_emb = get_i("rank.sigma_emb");
  rk.sigma_depth = get_i("rank.sigma_depth");
  rk.score_emb = get_s("rank.score_emb");
  rk.score_depth = get_s("rank.score_depth");
  for (int j = 0; j < cfg.n_layers; ++j) {
    const std::string suffix = "." + std::to_string(j);
    switch (cfg.pattern[static_cast<size_t>(j)]) {
      case LayerKind::FFN:
        rk.sigma_ffn[static_cast<size_t>(j)] = get_i("rank.sigma_ffn" + suffix);
        rk.score_ffn[static_cast<size_t>(j)] = get_s("rank.score_ffn" + suffix);
        break;
      case LayerKind::MAMBA:
        rk.sigma_mamba_ch[static_cast<size_t>(j)] = get_i("rank.sigma_mamba_ch" + suffix);
        rk.sigma_mamba_head[static_cast<size_t>(j)] = get_i("rank.sigma_mamba_head" + suffix);
        rk.score_mamba_ch[static_cast<size_t>(j)] = get_s("rank.score_mamba_ch" + suffix);
        rk.score_mamba_head[static_cast<size_t>(j)] = get_s("rank.score_mamba_head" + suffix);
        break;
      case LayerKind::ATTN:
        rk.sigma_attn[static_cast<size_t>(j)] = get_i("rank.sigma_attn" + suffix);
        rk.score_attn[static_cast<size_t>(j)] = get_s("rank.score_attn" + suffix);
        break;
    }
  }
  rk.validate(cfg);
  return rk;
}

}  // namespace nemelast
