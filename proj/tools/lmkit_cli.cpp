// SPDX-License-Identifier: Apache-2.0
// Command-line entry point: vocabulary, corpus, training, evaluation and
// compute-accounting workflows. Each run writes into its own directory under
// the output root (--out, or LMKIT_OUT), starting with the resolved config.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lmkit/lmkit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lmkit::cli {

struct Global {
  std::string out = "lmkit-runs";
  std::string name;
};

/// Every option of the subcommand with the value it resolved to.
json resolved_config(const CLI::App& sub, const Global& g) {
  json opts = json::object();
  for (const CLI::Option* o : sub.get_options()) {
    if (o->get_lnames().empty() || o->get_lnames()[0] == "help") continue;
    const auto& key = o->get_lnames()[0];
    if (o->get_expected_max() == 0) {
      opts[key] = o->count() > 0;
    } else if (o->count() > 0) {
      const auto res = o->results();
      opts[key] = (o->get_expected_max() > 1) ? json(res) : json(res.empty() ? "" : res.back());
    } else {
      opts[key] = o->get_default_str();
    }
  }
  return json{{"command", sub.get_name()}, {"out", g.out}, {"options", opts}};
}

fs::path start_run(const CLI::App& sub, const Global& g) {
  const fs::path dir = fs::path(g.out) / (g.name.empty() ? sub.get_name() : g.name);
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << resolved_config(sub, g).dump(2) << '\n';
  return dir;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw Error("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// ----------------------------------------------------------- vocab-train

struct VocabTrainArgs {
  std::string input;
  std::size_t size = 16384;
  std::string output;
};

int vocab_train(const CLI::App& sub, const Global& g, const VocabTrainArgs& a) {
  const auto dir = start_run(sub, g);
  const auto docs = read_text_dir(a.input);
  std::vector<std::string_view> views;
  for (const auto& d : docs) views.push_back(d.text);
  const auto vocab = train_bpe(std::span<const std::string_view>(views), a.size);
  const std::string path = a.output.empty() ? (dir / "vocab.txt").string() : a.output;
  vocab.save_file(path);
  write_json(dir / "vocab.json", {{"path", path}, {"size", vocab.size()}, {"hash", vocab.hash()},
                                  {"documents", docs.size()}});
  std::cout << "vocabulary: " << vocab.size() << " tokens, hash " << vocab.hash() << " -> " << path << '\n';
  return 0;
}

// --------------------------------------------------------- vocab-analyze

struct VocabAnalyzeArgs {
  std::string vocab;
  std::string corpus;
  std::string compare;
};

int vocab_analyze(const CLI::App& sub, const Global& g, const VocabAnalyzeArgs& a) {
  const auto dir = start_run(sub, g);
  const auto vocab = TokenVocabulary::load_file(a.vocab);
  std::optional<FrequencyTable> freq;
  json extra = json::array();
  if (!a.corpus.empty()) {
    std::vector<TokenId> all;
    std::uint64_t bytes = 0;
    for (const auto& d : read_text_dir(a.corpus)) {
      const auto ids = encode(d.text, vocab);
      all.insert(all.end(), ids.begin(), ids.end());
      bytes += d.text.size();
    }
    freq = FrequencyTable::count(all, vocab.size());
    extra.push_back({{"kind", "bytes_per_token"},
                     {"bytes", bytes},
                     {"tokens", all.size()},
                     {"bytes_per_token", all.empty() ? 0.0 : static_cast<double>(bytes) / static_cast<double>(all.size())}});
  }
  if (!a.compare.empty()) {
    const auto other = TokenVocabulary::load_file(a.compare);
    const auto ov = vocab_overlap(vocab, other);
    extra.push_back({{"kind", "overlap"},
                     {"compare", a.compare},
                     {"shared", ov.shared},
                     {"fraction_of_a", ov.fraction_of_a},
                     {"fraction_of_b", ov.fraction_of_b}});
  }
  std::ostringstream report;
  write_vocab_report(report, vocab, freq ? &*freq : nullptr);
  for (const auto& r : extra) report << r.dump() << '\n';
  std::ofstream(dir / "report.jsonl") << report.str();

  std::istringstream lines(report.str());
  std::string line;
  while (std::getline(lines, line)) {
    const auto r = json::parse(line);
    const std::string kind = r["kind"];
    if (kind == "exact_duplicate") {
      std::cout << "duplicate   " << r["hex"].get<std::string>() << " ids " << r["ids"].dump() << '\n';
    } else if (kind == "near_duplicate") {
      std::cout << "near-dup    " << r["normal_form_hex"].get<std::string>() << " x" << r["members"].size() << '\n';
    } else if (kind == "summary") {
      std::cout << "tokens " << r["vocab_size"] << ", duplicate groups " << r["exact_duplicate_groups"]
                << ", near-duplicate classes " << r["near_duplicate_classes"];
      if (r.contains("zipf_exponent")) std::cout << ", zipf exponent " << fmt(r["zipf_exponent"], 3);
      std::cout << '\n';
    } else if (kind == "overlap") {
      std::cout << "overlap     " << r["shared"] << " shared, " << fmt(r["fraction_of_a"], 4) << " of this vocabulary\n";
    } else if (kind == "bytes_per_token") {
      std::cout << "bytes/token " << fmt(r["bytes_per_token"], 4) << '\n';
    }
  }
  return 0;
}

// ---------------------------------------------------------- corpus-build

struct CorpusBuildArgs {
  std::string vocab;
  std::string input;
  std::size_t test_docs = 1;
  std::uint64_t seed = 0;
  std::size_t min_bytes = 1;
  double min_bpt = 0.0;
};

int corpus_build(const CLI::App& sub, const Global& g, const CorpusBuildArgs& a) {
  const auto dir = start_run(sub, g);
  const auto vocab = TokenVocabulary::load_file(a.vocab);
  const auto docs = read_text_dir(a.input);
  const auto res = ingest(std::span<const SourceDocument>(docs), vocab, a.min_bytes, a.min_bpt);
  const auto splits = make_splits(res.corpus, a.test_docs, a.seed);
  write_corpus((dir / "train.lmkc").string(), splits.train);
  write_corpus((dir / "test.lmkc").string(), splits.test);
  {
    std::ofstream os(dir / "excluded.jsonl");
    for (const auto& e : res.excluded)
      os << json{{"index", e.index}, {"name", e.name}, {"reason", e.reason}, {"bytes", e.bytes},
                 {"bytes_per_token", e.bytes_per_token}}.dump()
         << '\n';
  }
  write_json(dir / "corpus.json", {{"vocab_hash", vocab.hash()},
                                   {"documents", docs.size()},
                                   {"excluded", res.excluded.size()},
                                   {"train_tokens", splits.train.size()},
                                   {"test_tokens", splits.test.size()},
                                   {"train_documents", splits.train.num_documents()},
                                   {"test_documents", splits.test.num_documents()}});
  std::cout << "kept " << docs.size() - res.excluded.size() << " of " << docs.size() << " documents; train "
            << splits.train.size() << " tokens, test " << splits.test.size() << " tokens -> " << dir.string()
            << '\n';
  return 0;
}

// ----------------------------------------------------------------- train

struct TrainArgs {
  std::string preset;
  std::string corpus;
  std::string vocab;
  std::string eval_corpus;
  double hours = 0;
  double tps = 1000;
  std::uint64_t steps = 0;
  std::size_t batch = 8;
  std::size_t seq = 0;
  std::size_t accumulation = 1;
  std::uint64_t seed = 0;
  double lr = 6e-4;
  std::uint64_t log_interval = 10;
  std::string precision = "float";
  bool carry_state = false;
};

template <typename T>
int train_run(const fs::path& dir, const TrainArgs& a, const ModelConfig& cfg, const TokenCorpus& corpus,
              const TokenVocabulary& vocab, const std::optional<TokenCorpus>& eval, TrainOptions o) {
  o.byte_lengths = TokenCorpus::byte_lengths(vocab);
  if (eval) o.eval_corpus = &*eval;
  o.checkpoint_path = (dir / "model.lmkm").string();
  o.on_log = [](const LogRecord& r) {
    std::cerr << "step " << r.step << " loss " << fmt(r.train_loss);
    if (r.eval_metric) std::cerr << " eval " << fmt(*r.eval_metric);
    std::cerr << " lr " << r.lr << '\n';
  };
  auto res = train(ModelParams<T>::init(cfg, a.seed), cfg, corpus, o);
  res.log.save((dir / "log.jsonl").string());
  write_json(dir / "summary.json", {{"steps", o.steps},
                                    {"micro_batches", res.micro_batches},
                                    {"epochs", res.epochs},
                                    {"incidents", res.incidents},
                                    {"final_train_loss", res.log.records().back().train_loss}});
  std::cout << "trained " << o.steps << " steps; final loss " << fmt(res.log.records().back().train_loss)
            << " -> " << dir.string() << '\n';
  return 0;
}

int train_cmd(const CLI::App& sub, const Global& g, const TrainArgs& a) {
  const auto dir = start_run(sub, g);
  const auto vocab = TokenVocabulary::load_file(a.vocab);
  const auto corpus = read_corpus(a.corpus);
  if (corpus.vocab_hash() != vocab.hash()) {
    throw Error("train: corpus " + a.corpus + " was built with vocabulary " + std::to_string(corpus.vocab_hash()) +
                ", " + a.vocab + " has hash " + std::to_string(vocab.hash()));
  }
  std::optional<TokenCorpus> eval;
  if (!a.eval_corpus.empty()) {
    eval = read_corpus(a.eval_corpus);
    if (eval->vocab_hash() != vocab.hash()) throw Error("train: eval corpus uses a different vocabulary");
  }
  ModelConfig cfg = preset(a.preset);
  cfg.vocab_size = corpus.id_limit();  // the vocabulary plus the document separator
  if (a.seq > 0) {
    cfg.seq_len = a.seq;
    cfg.block_len = std::min(cfg.block_len, cfg.seq_len);
  }
  cfg.validate();
  TrainOptions o;
  o.plan = {a.batch, cfg.seq_len, cfg.seq_len, a.accumulation};
  o.plan.validate();
  if (a.steps > 0) {
    o.steps = a.steps;
  } else if (a.hours > 0) {
    const auto budget = plan_budget(a.tps, a.hours, o.plan);
    write_json(dir / "budget.json", budget);
    o.steps = std::max<std::uint64_t>(budget.steps, 1);
  } else {
    throw Error("train: give --steps or --hours");
  }
  o.lr0 = a.lr;
  o.log_interval = a.log_interval;
  o.carry_state = a.carry_state;
  o.reference_tps = a.tps;
  o.vocab_hash = vocab.hash();
  if (a.precision == "double") return train_run<double>(dir, a, cfg, corpus, vocab, eval, o);
  return train_run<float>(dir, a, cfg, corpus, vocab, eval, o);
}

// ------------------------------------------------------------------ eval

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::string> corpora;
  std::string vocab;
  std::string protocol = "fast";
  std::size_t stride = 128;
  std::size_t batch = 0;
  std::size_t max_batches = 500;
  std::string precision = "float";
};

template <typename T>
std::vector<EvalReport> eval_run(const EvalArgs& a, const std::vector<TokenCorpus>& splits,
                                 const std::vector<std::uint32_t>& bl) {
  const auto ck = load_checkpoint<T>(a.checkpoint);
  const Protocol p = parse_protocol(a.protocol);
  EvalOptions opt = p == Protocol::kFast ? EvalOptions::fast(ck.config.seq_len, a.batch ? a.batch : 16, a.max_batches)
                                         : EvalOptions::slow(ck.config.seq_len, a.stride, a.batch ? a.batch : 1);
  return eval_splits(model_scorer(ck.params, ck.config), ck.vocab_hash, splits, bl, opt);
}

int eval_cmd(const CLI::App& sub, const Global& g, const EvalArgs& a) {
  const auto dir = start_run(sub, g);
  const auto vocab = TokenVocabulary::load_file(a.vocab);
  const auto header = load_checkpoint<float>(a.checkpoint);
  if (header.vocab_hash != vocab.hash()) {
    throw Error("eval: checkpoint " + a.checkpoint + " was trained with vocabulary " +
                std::to_string(header.vocab_hash) + ", " + a.vocab + " has hash " + std::to_string(vocab.hash()));
  }
  std::vector<TokenCorpus> splits;
  for (const auto& c : a.corpora) splits.push_back(read_corpus(c));
  const auto bl = TokenCorpus::byte_lengths(vocab);
  const auto reps = a.precision == "double" ? eval_run<double>(a, splits, bl) : eval_run<float>(a, splits, bl);
  std::ofstream os(dir / "eval.jsonl");
  std::cout << std::left << std::setw(10) << "split" << std::setw(9) << "protocol" << std::setw(12) << "tokens"
            << std::setw(13) << "min context" << std::setw(12) << "perplexity" << "normalised perplexity\n";
  for (const auto& r : reps) {
    os << json(r).dump() << '\n';
    std::cout << std::left << std::setw(10) << r.split << std::setw(9) << protocol_name(r.protocol) << std::setw(12)
              << r.tokens << std::setw(13) << r.min_context << std::setw(12) << fmt(r.perplexity, 3)
              << fmt(r.normalised_perplexity, 3) << '\n';
  }
  return 0;
}

// ------------------------------------------------------------ throughput

struct ThroughputArgs {
  std::string preset;
  std::vector<std::size_t> batches = {1, 2, 4};
  std::string device = "cpu";
  std::size_t warmup = 10;
  std::size_t timed = 20;
  std::size_t vocab_size = 0;
  std::string precision = "float";
  std::uint64_t seed = 0;
};

int throughput_cmd(const CLI::App& sub, const Global& g, const ThroughputArgs& a) {
  const auto dir = start_run(sub, g);
  ModelConfig cfg = preset(a.preset);
  if (a.vocab_size > 0) cfg.vocab_size = a.vocab_size;
  ThroughputOptions opt;
  opt.device = a.device;
  opt.seq_len = cfg.seq_len;
  opt.warmup_steps = a.warmup;
  opt.timed_steps = a.timed;
  opt.config_hash = config_hash(cfg);
  const auto rep = a.precision == "double" ? measure_throughput(model_step_factory<double>(cfg, a.seed), a.batches, opt)
                                           : measure_throughput(model_step_factory<float>(cfg, a.seed), a.batches, opt);
  json j = rep;
  j["config"] = cfg;
  write_json(dir / "throughput.json", j);
  std::cout << std::left << std::setw(8) << "batch" << std::setw(16) << "step seconds" << "tokens/s\n";
  for (const auto& e : rep.entries) {
    std::cout << std::left << std::setw(8) << e.batch;
    if (e.ok)
      std::cout << std::setw(16) << fmt(e.median_step_seconds, 5) << fmt(e.tokens_per_second, 1) << '\n';
    else
      std::cout << "failed: " << e.error << '\n';
  }
  std::cout << "best " << fmt(rep.best_tokens_per_second, 1) << " tokens/s at batch " << rep.best_batch
            << " (timing, not deterministic)\n";
  return 0;
}

// ------------------------------------------------------------------ plan

struct PlanArgs {
  double tps = 0;
  std::string throughput;
  double hours = 0;
  std::uint64_t tokens_per_step = 0;
  std::string preset;
  std::vector<double> convert;
};

int plan_cmd(const CLI::App& sub, const Global& g, const PlanArgs& a) {
  const auto dir = start_run(sub, g);
  double tps = a.tps;
  if (!a.throughput.empty()) {
    std::ifstream is(a.throughput);
    if (!is) throw Error("plan: cannot read " + a.throughput);
    tps = json::parse(is).at("best_tokens_per_second").get<double>();
  }
  if (!(tps > 0)) throw Error("plan: give --tps or --throughput");
  const auto b = plan_budget(tps, a.hours, a.tokens_per_step);
  json j = b;
  std::cout << "tokens " << std::setprecision(6) << b.total_tokens << " (" << fmt(b.total_tokens / 1e9, 3)
            << "B), steps " << b.steps << '\n';
  if (!a.preset.empty()) {
    const auto cfg = preset(a.preset);
    j["preset"] = a.preset;
    j["forward_flops"] = count_forward_flops(cfg).total();
    j["total_training_flops"] = total_training_flops(b.total_tokens, cfg);
    std::cout << "training exaFLOPs " << fmt(j["total_training_flops"].get<double>() / 1e18, 3) << '\n';
  }
  json conv = json::array();
  for (double v : a.convert) {
    const double h = convert_hardware(b, v);
    conv.push_back({{"tokens_per_second", v}, {"hours", h}});
    std::cout << "at " << v << " tokens/s: " << fmt(h, 2) << " hours\n";
  }
  j["conversions"] = conv;
  write_json(dir / "budget.json", j);
  return 0;
}

// ------------------------------------------------------------------- fit

/// Two numbers per line (resource, normalised perplexity); '#' starts a comment.
std::vector<ScalePoint> read_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("fit: cannot read records file " + path);
  std::vector<ScalePoint> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    ScalePoint p;
    std::string rest;
    ls.clear();
    ls.str(line);
    if (!(ls >> p.x >> p.y) || (ls >> rest)) {
      throw Error("fit: " + path + " line " + std::to_string(n) + ": expected two numbers, got '" + line + "'");
    }
    if (!(p.x > 0)) throw Error("fit: " + path + " line " + std::to_string(n) + ": resource must be positive");
    out.push_back(p);
  }
  return out;
}

struct FitArgs {
  std::string records;
  std::string compare;
  std::string axis = "hours";
};

Series as_series(const std::vector<ScalePoint>& pts) {
  Series s;
  for (const auto& p : pts) s.emplace_back(p.x, p.y);
  return s;
}

void print_fit_table(const std::vector<ScalePoint>& pts, const ScalingFit& f) {
  std::cout << std::left << std::setw(14) << "resource" << std::setw(14) << "norm. ppl" << std::setw(12) << "fitted"
            << "residual\n";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::ostringstream x;
    x << std::setprecision(6) << pts[i].x;
    std::cout << std::left << std::setw(14) << x.str() << std::setw(14) << fmt(pts[i].y, 3) << std::setw(12)
              << fmt(f.predict(pts[i].x), 3) << fmt(f.residuals[i], 4) << '\n';
  }
  std::cout << "slope " << fmt(f.slope, 4) << " intercept " << fmt(f.intercept, 4) << '\n';
}

int fit_cmd(const CLI::App& sub, const Global& g, const FitArgs& a) {
  const auto axis = parse_axis(a.axis);
  const auto pts = read_records(a.records);
  const auto f = fit_scaling_law(pts, axis);
  const auto dir = start_run(sub, g);
  double lo = pts.front().x, hi = pts.front().x;
  for (const auto& p : pts) lo = std::min(lo, p.x), hi = std::max(hi, p.x);
  json j{{"fit", f}, {"points", pts.size()}};
  print_fit_table(pts, f);
  write_plot_data((dir / "points.txt").string(), as_series(pts));
  if (!a.compare.empty()) {
    const auto pts2 = read_records(a.compare);
    const auto f2 = fit_scaling_law(pts2, axis);
    for (const auto& p : pts2) lo = std::min(lo, p.x), hi = std::max(hi, p.x);
    std::cout << '\n';
    print_fit_table(pts2, f2);
    j["compare_fit"] = f2;
    write_plot_data((dir / "compare_points.txt").string(), as_series(pts2));
    if (f.slope != f2.slope) {
      const auto r = intersection_sensitivity(f, f2, 0.0005, 0.0005);
      j["intersection"] = r;
      hi = std::max(hi, std::isfinite(r.at) ? r.at : hi);
      write_plot_data((dir / "compare_line.txt").string(), fitted_line(f2, lo, hi));
      std::cout << "intersection at " << std::setprecision(6) << r.at << " (" << r.low << " to " << r.high
                << " when slopes and intercepts move by 0.0005)\n";
    } else {
      j["intersection"] = nullptr;
      std::cout << "equal slopes: the laws never intersect\n";
    }
  }
  write_plot_data((dir / "line.txt").string(), fitted_line(f, lo, hi));
  write_json(dir / "fit.json", j);
  return 0;
}

}  // namespace lmkit::cli

int main(int argc, char** argv) {
  using namespace lmkit::cli;
  CLI::App app{"lmkit: language-model training and compute accounting"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "TOML file of option values; unknown keys are rejected");
  app.allow_config_extras(false);
  Global g;
  app.add_option("--out", g.out, "Output root")->envname("LMKIT_OUT");
  app.add_option("--name", g.name, "Run directory name (defaults to the command)");

  auto strict = [](CLI::App* s) {
    s->allow_config_extras(false);
    return s;
  };

  VocabTrainArgs vt;
  auto* s_vt = strict(app.add_subcommand("vocab-train", "Train a BPE vocabulary from a directory of text files"));
  s_vt->add_option("--input", vt.input, "Directory of text files")->required()->check(CLI::ExistingDirectory);
  s_vt->add_option("--size", vt.size, "Vocabulary size")->check(CLI::Range(257, 1 << 24));
  s_vt->add_option("--output", vt.output, "Vocabulary file (defaults into the run directory)");

  VocabAnalyzeArgs va;
  auto* s_va = strict(app.add_subcommand("vocab-analyze", "Duplicate, near-duplicate, Zipf and overlap report"));
  s_va->add_option("--vocab", va.vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  s_va->add_option("--corpus", va.corpus, "Directory of text files to count tokens on")->check(CLI::ExistingDirectory);
  s_va->add_option("--compare", va.compare, "Second vocabulary for the overlap")->check(CLI::ExistingFile);

  CorpusBuildArgs cb;
  auto* s_cb = strict(app.add_subcommand("corpus-build", "Tokenise, filter and split a text directory"));
  s_cb->add_option("--vocab", cb.vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  s_cb->add_option("--input", cb.input, "Directory of text files")->required()->check(CLI::ExistingDirectory);
  s_cb->add_option("--test-docs", cb.test_docs, "Documents held out for the test split");
  s_cb->add_option("--seed", cb.seed, "Shuffle seed");
  s_cb->add_option("--min-bytes", cb.min_bytes, "Drop documents shorter than this");
  s_cb->add_option("--min-bytes-per-token", cb.min_bpt, "Drop documents that compress worse than this");

  TrainArgs tr;
  auto* s_tr = strict(app.add_subcommand("train", "Train a preset under a step or compute budget"));
  s_tr->add_option("--preset", tr.preset, "Model preset")->required();
  s_tr->add_option("--corpus", tr.corpus, "Training corpus")->required()->check(CLI::ExistingFile);
  s_tr->add_option("--vocab", tr.vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  s_tr->add_option("--eval-corpus", tr.eval_corpus, "Held-out corpus for fast eval at log steps")
      ->check(CLI::ExistingFile);
  s_tr->add_option("--hours", tr.hours, "Compute class in reference-device hours");
  s_tr->add_option("--tps", tr.tps, "Reference-device tokens per second");
  s_tr->add_option("--steps", tr.steps, "Fixed step count (overrides --hours)");
  s_tr->add_option("--batch", tr.batch, "Sequences per micro-batch");
  s_tr->add_option("--seq", tr.seq, "Sequence length (0 keeps the preset's)");
  s_tr->add_option("--accumulation", tr.accumulation, "Micro-batches per step");
  s_tr->add_option("--seed", tr.seed, "Initialisation seed");
  s_tr->add_option("--lr", tr.lr, "Starting learning rate");
  s_tr->add_option("--log-interval", tr.log_interval, "Steps between log records");
  s_tr->add_option("--precision", tr.precision, "float or double")->check(CLI::IsMember({"float", "double"}));
  s_tr->add_flag("--carry-state", tr.carry_state, "Carry recurrent state across batches of a lane");

  EvalArgs ev;
  auto* s_ev = strict(app.add_subcommand("eval", "Fast or slow evaluation on corpus splits"));
  s_ev->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  s_ev->add_option("--corpus", ev.corpora, "Corpus split (repeatable)")->required()->check(CLI::ExistingFile);
  s_ev->add_option("--vocab", ev.vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  s_ev->add_option("--protocol", ev.protocol, "fast or slow")->check(CLI::IsMember({"fast", "slow"}));
  s_ev->add_option("--stride", ev.stride, "Slow-eval stride and scored tail")->check(CLI::PositiveNumber);
  s_ev->add_option("--batch", ev.batch, "Windows per batch (0 picks the protocol default)");
  s_ev->add_option("--max-batches", ev.max_batches, "Fast-eval batch cap (0 for none)");
  s_ev->add_option("--precision", ev.precision, "float or double")->check(CLI::IsMember({"float", "double"}));

  ThroughputArgs tp;
  auto* s_tp = strict(app.add_subcommand("throughput", "Measure tokens per second over a batch sweep"));
  s_tp->add_option("--preset", tp.preset, "Model preset")->required();
  s_tp->add_option("--batches", tp.batches, "Batch sizes to try")->delimiter(',');
  s_tp->add_option("--device", tp.device, "Device label stored in the report");
  s_tp->add_option("--warmup", tp.warmup, "Discarded steps per batch size");
  s_tp->add_option("--timed", tp.timed, "Timed steps per batch size")->check(CLI::PositiveNumber);
  s_tp->add_option("--vocab-size", tp.vocab_size, "Override the preset's vocabulary size (0 keeps it)");
  s_tp->add_option("--precision", tp.precision, "float or double")->check(CLI::IsMember({"float", "double"}));
  s_tp->add_option("--seed", tp.seed, "Initialisation seed");

  PlanArgs pl;
  auto* s_pl = strict(app.add_subcommand("plan", "Token and step budget for a compute class"));
  s_pl->add_option("--tps", pl.tps, "Reference tokens per second");
  s_pl->add_option("--throughput", pl.throughput, "Throughput report to take the best rate from")
      ->check(CLI::ExistingFile);
  s_pl->add_option("--hours", pl.hours, "Compute-class hours")->required();
  s_pl->add_option("--tokens-per-step", pl.tokens_per_step, "Tokens per optimiser step")->required();
  s_pl->add_option("--preset", pl.preset, "Also count training FLOPs for this preset");
  s_pl->add_option("--convert", pl.convert, "Other devices' tokens per second")->delimiter(',');

  FitArgs ft;
  auto* s_ft = strict(app.add_subcommand("fit", "Fit normalised perplexity against log resource"));
  s_ft->add_option("--records", ft.records, "Two columns: resource and normalised perplexity")
      ->required()
      ->check(CLI::ExistingFile);
  s_ft->add_option("--compare", ft.compare, "Second record set; reports the intersection")->check(CLI::ExistingFile);
  s_ft->add_option("--axis", ft.axis, "hours or flops")->check(CLI::IsMember({"hours", "flops"}));

  CLI11_PARSE(app, argc, argv);
  try {
    if (*s_vt) return vocab_train(*s_vt, g, vt);
    if (*s_va) return vocab_analyze(*s_va, g, va);
    if (*s_cb) return corpus_build(*s_cb, g, cb);
    if (*s_tr) return train_cmd(*s_tr, g, tr);
    if (*s_ev) return eval_cmd(*s_ev, g, ev);
    if (*s_tp) return throughput_cmd(*s_tp, g, tp);
    if (*s_pl) return plan_cmd(*s_pl, g, pl);
    if (*s_ft) return fit_cmd(*s_ft, g, ft);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
