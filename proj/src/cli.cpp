#include "spm/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "spm/beam_search.hpp"
#include "spm/checkpoint.hpp"
#include "spm/diagnostics.hpp"
#include "spm/rouge.hpp"
#include "spm/toy_data.hpp"
#include "spm/trainer.hpp"
#include "spm/vocab.hpp"

namespace spm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw std::runtime_error(std::string(what) + " not found: " + path.string());
}

std::vector<std::pair<WordList, WordList>> read_pairs(const fs::path& sys_file, const fs::path& ref_file) {
  require_file(sys_file, "system file");
  require_file(ref_file, "reference file");
  const auto sys = read_lines(sys_file);
  const auto ref = read_lines(ref_file);
  if (sys.size() != ref.size()) {
    throw std::runtime_error("line count mismatch: system has " + std::to_string(sys.size()) +
                             " lines, reference has " + std::to_string(ref.size()));
  }
  std::vector<std::pair<WordList, WordList>> pairs;
  for (std::size_t i = 0; i < sys.size(); ++i) pairs.emplace_back(rouge_tokenize(sys[i]), rouge_tokenize(ref[i]));
  return pairs;
}

Vocabulary load_vocab(const fs::path& merges, const fs::path& vocab) {
  require_file(merges, "merge table");
  require_file(vocab, "vocabulary file");
  return Vocabulary::load(merges, vocab);
}

void check_compatible(const ModelConfig& cfg, const Vocabulary& vocab) {
  if (cfg.source_vocab != vocab.size() || cfg.target_vocab != vocab.size()) {
    throw std::runtime_error("vocabulary has " + std::to_string(vocab.size()) + " tokens but checkpoint expects " +
                             std::to_string(cfg.source_vocab) + "/" + std::to_string(cfg.target_vocab));
  }
}

struct VocabPaths {
  std::string merges;
  std::string vocab;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--merges", merges, "Merge table file")->required();
    cmd->add_option("--vocab", vocab, "Vocabulary file")->required();
  }
};

// ---- bpe -------------------------------------------------------------------

void add_bpe(CLI::App& app, std::ostream& out) {
  auto* bpe = app.add_subcommand("bpe", "Learn or apply joint BPE");
  bpe->require_subcommand(1);

  auto* learn = bpe->add_subcommand("learn", "Learn merges jointly from all input files");
  auto inputs = std::make_shared<std::vector<std::string>>();
  auto num_merges = std::make_shared<std::size_t>(5000);
  auto paths = std::make_shared<VocabPaths>();
  learn->add_option("--input", *inputs, "Training text files")->required();
  learn->add_option("--num-merges", *num_merges, "Number of merge operations")->capture_default_str();
  paths->add_to(learn);
  learn->callback([=, &out] {
    std::vector<std::string> lines;
    for (const auto& f : *inputs) {
      require_file(f, "input file");
      auto more = read_lines(f);
      lines.insert(lines.end(), more.begin(), more.end());
    }
    const auto vocab = Vocabulary::learn(lines, *num_merges);
    vocab.save(paths->merges, paths->vocab);
    out << "merges\t" << vocab.merges().size() << "\nvocabulary\t" << vocab.size() << "\n";
  });

  for (const char* mode : {"apply", "restore"}) {
    const bool apply = std::string(mode) == "apply";
    auto* cmd = bpe->add_subcommand(mode, apply ? "Segment text into subwords" : "Join subwords back into words");
    auto in = std::make_shared<std::string>();
    auto dst = std::make_shared<std::string>();
    auto vp = std::make_shared<VocabPaths>();
    cmd->add_option("--input", *in)->required();
    cmd->add_option("--output", *dst)->required();
    vp->add_to(cmd);
    cmd->callback([=] {
      require_file(*in, "input file");
      const auto vocab = load_vocab(vp->merges, vp->vocab);
      std::string text;
      for (const auto& line : read_lines(*in)) {
        if (apply) {
          text += join_words(vocab.segment(line));
        } else {
          std::vector<int> ids;
          for (const auto& tok : split_whitespace(line)) ids.push_back(vocab.id(tok));
          text += vocab.restore(ids);
        }
        text += '\n';
      }
      write_text(*dst, text);
    });
  }
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config_file;
  VocabPaths vocab;
  std::string train_src, train_tgt, valid_src, valid_tgt;
  std::string out_dir;
  bool resume = false;
  bool no_spm = false;
  std::map<std::string, std::string> overrides;
};

const std::vector<std::string> kTrainKeys = {"C",          "learning_rate", "decay_factor", "decay_start_epoch",
                                             "clip_norm",  "batch_size",    "max_epochs",   "dropout_rate",
                                             "spm_enabled", "early_stopping", "patience",   "seed",
                                             "embed_dim",  "hidden_dim",    "layers"};

std::string kebab(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
  return key;
}

void run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  std::map<std::string, std::string> settings;
  if (!a.config_file.empty()) {
    require_file(a.config_file, "config file");
    settings = read_key_value_file(a.config_file);
  }
  for (const auto& [k, v] : a.overrides) settings[k] = v;
  if (a.no_spm) settings["spm_enabled"] = "false";

  TrainConfig cfg;
  ModelConfig model_cfg;
  for (const auto& [k, v] : settings) {
    if (k == "embed_dim") model_cfg.embed_dim = std::stoull(v);
    else if (k == "hidden_dim") model_cfg.hidden_dim = std::stoull(v);
    else if (k == "layers") model_cfg.layers = std::stoull(v);
    else if (!cfg.set(k, v)) throw UsageError("unknown config key '" + k + "'");
  }
  cfg.validate();

  require_file(a.train_src, "training source");
  require_file(a.train_tgt, "training target");
  const auto vocab = load_vocab(a.vocab.merges, a.vocab.vocab);
  model_cfg.source_vocab = model_cfg.target_vocab = vocab.size();

  IngestReport train_rep, valid_rep;
  const auto train = ingest(a.train_src, a.train_tgt, vocab, &train_rep);
  for (const auto& w : train_rep.warnings) err << "warning: " << w << "\n";
  std::vector<Example> valid;
  if (!a.valid_src.empty() || !a.valid_tgt.empty()) {
    require_file(a.valid_src, "validation source");
    require_file(a.valid_tgt, "validation target");
    valid = ingest(a.valid_src, a.valid_tgt, vocab, &valid_rep);
  }
  if (train.empty()) throw std::runtime_error("no training pairs left after filtering");

  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  const fs::path best_path = dir / "best.ckpt", last_path = dir / "last.ckpt", report_path = dir / "train_report.tsv";

  ModelParams params(model_cfg);
  params.initialize(cfg.seed);
  std::optional<Checkpoint> resumed;
  if (a.resume) {
    require_file(last_path, "checkpoint");
    resumed = load_checkpoint(last_path);
    if (!(resumed->params.config == model_cfg)) throw std::runtime_error("resume: checkpoint model config differs");
    params.copy_from(resumed->params);
  }
  Trainer trainer(params, cfg, vocab.specials());
  if (resumed) {
    require_file(best_path, "best checkpoint");
    trainer.restore(resumed->state, resumed->extra, load_checkpoint(best_path).params);
  }

  std::ofstream report(report_path, a.resume ? std::ios::app : std::ios::trunc);
  if (!report) throw std::runtime_error("cannot write " + report_path.string());
  std::vector<EpochStats> epochs;
  const auto result = trainer.fit(train, valid.empty() ? nullptr : &valid, [&](const EpochStats& s, const Trainer& t) {
    report << format_epoch_line(s) << "\n" << std::flush;
    out << format_epoch_line(s) << "\n";
    epochs.push_back(s);
    save_checkpoint(last_path, t.params(), t.state(), t.optimizer_tensors());
    save_checkpoint(best_path, t.best_params(), t.state());
  });

  json manifest;
  manifest["command"] = "train";
  manifest["seed"] = cfg.seed;
  manifest["config"] = cfg.to_map();
  manifest["model"] = {{"embed_dim", model_cfg.embed_dim},       {"hidden_dim", model_cfg.hidden_dim},
                       {"layers", model_cfg.layers},             {"source_vocab", model_cfg.source_vocab},
                       {"target_vocab", model_cfg.target_vocab}, {"parameters", params.parameter_count()}};
  manifest["vocabulary"] = {{"merges", fs::absolute(a.vocab.merges).string()},
                            {"vocab", fs::absolute(a.vocab.vocab).string()}};
  manifest["data"] = {{"train_source", a.train_src}, {"train_target", a.train_tgt},
                      {"valid_source", a.valid_src}, {"valid_target", a.valid_tgt},
                      {"train_pairs", train_rep.total},  {"train_kept", train_rep.kept},
                      {"dropped_longer_target", train_rep.dropped_longer},
                      {"dropped_empty_source", train_rep.dropped_empty}};
  manifest["checkpoints"] = {{"best", best_path.string()}, {"last", last_path.string()}};
  manifest["report"] = report_path.string();
  manifest["best_epoch"] = result.best_epoch;
  manifest["stopped_early"] = result.stopped_early;
  json metrics = json::array();
  for (const auto& s : epochs) {
    metrics.push_back({{"epoch", s.epoch}, {"train_loss", s.train_loss}, {"train_objective", s.train_objective},
                       {"val_loss", std::isnan(s.val_loss) ? json(nullptr) : json(s.val_loss)},
                       {"learning_rate", s.learning_rate}});
  }
  manifest["epochs"] = metrics;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---- decode / align --------------------------------------------------------

void run_decode(const std::string& ckpt, const VocabPaths& vp, const std::string& input, const std::string& output,
                const BeamConfig& beam) {
  require_file(ckpt, "checkpoint");
  require_file(input, "source file");
  const auto vocab = load_vocab(vp.merges, vp.vocab);
  check_compatible(read_checkpoint_config(ckpt), vocab);
  const auto params = load_checkpoint(ckpt).params;
  std::string text;
  for (const auto& line : read_lines(input)) {
    const auto ids = vocab.encode(line);
    if (!ids.empty()) text += vocab.restore(beam_search(ids, params, beam, vocab.specials()).ids);
    text += '\n';
  }
  write_text(output, text);
}

void run_align(const std::string& ckpt, const VocabPaths& vp, const std::string& src_file,
               const std::string& tgt_file, const std::string& out_dir, const std::string& pairs_file,
               std::ostream& err) {
  require_file(ckpt, "checkpoint");
  require_file(src_file, "source file");
  require_file(tgt_file, "target file");
  const auto vocab = load_vocab(vp.merges, vp.vocab);
  check_compatible(read_checkpoint_config(ckpt), vocab);
  const auto params = load_checkpoint(ckpt).params;
  const auto src = read_lines(src_file);
  const auto tgt = read_lines(tgt_file);
  if (src.size() != tgt.size()) {
    throw std::runtime_error("line count mismatch: source has " + std::to_string(src.size()) +
                             " lines, target has " + std::to_string(tgt.size()));
  }
  fs::create_directories(out_dir);
  std::vector<std::pair<std::vector<int>, std::vector<int>>> usable;
  for (std::size_t n = 0; n < src.size(); ++n) {
    auto x = vocab.encode(src[n]);
    auto y = frame_target(vocab.encode(tgt[n]), vocab.specials());
    if (x.empty() || y.size() - 1 > x.size()) {
      err << "warning: line " << n + 1 << ": skipped (empty source or target longer than source)\n";
      continue;
    }
    const auto al = extract_alignments(x, y, params, vocab.specials(), &vocab);
    write_text(fs::path(out_dir) / ("attn_" + std::to_string(n + 1) + ".tsv"), al.attention.to_tsv());
    write_text(fs::path(out_dir) / ("spm_" + std::to_string(n + 1) + ".tsv"), al.spm.to_tsv());
    usable.emplace_back(std::move(x), std::move(y));
  }
  if (!pairs_file.empty()) {
    const auto pairs = harvest_pairs(usable, params, vocab.specials());
    std::string text = "target\tspm_argmax\tcount\n";
    for (const auto& pc : pair_frequencies(pairs)) {
      text += vocab.display(pc.pair.target) + "\t" + vocab.display(pc.pair.predicted) + "\t" +
              std::to_string(pc.count) + "\n";
    }
    write_text(pairs_file, text);
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention encoder-decoder with a source-side prediction module", "spm"};
  app.require_subcommand(1);

  add_bpe(app, out);

  TrainArgs targs;
  auto* train = app.add_subcommand("train", "Train a model; writes checkpoints, report and manifest");
  train->add_option("--config", targs.config_file, "key = value file with training settings");
  targs.vocab.add_to(train);
  train->add_option("--train-src", targs.train_src)->required();
  train->add_option("--train-tgt", targs.train_tgt)->required();
  train->add_option("--valid-src", targs.valid_src);
  train->add_option("--valid-tgt", targs.valid_tgt);
  train->add_option("--out-dir", targs.out_dir)->required();
  train->add_flag("--resume", targs.resume, "Continue from <out-dir>/last.ckpt");
  train->add_flag("--no-spm", targs.no_spm, "Train the baseline objective without the SPM loss");
  for (const auto& key : kTrainKeys) {
    train->add_option_function<std::string>("--" + kebab(key), [&targs, key](const std::string& v) {
      targs.overrides[key] = v;
    });
  }
  train->callback([&] { run_train(targs, out, err); });

  std::string ckpt, input, output;
  VocabPaths dvp;
  BeamConfig beam;
  bool no_norm = false;
  auto* decode = app.add_subcommand("decode", "Beam-search headlines for each source line");
  decode->add_option("--checkpoint", ckpt)->required();
  dvp.add_to(decode);
  decode->add_option("--input", input)->required();
  decode->add_option("--output", output)->required();
  decode->add_option("--beam-size", beam.beam_size)->capture_default_str();
  decode->add_option("--max-steps", beam.max_steps, "0 = source length")->capture_default_str();
  decode->add_flag("--no-length-normalize", no_norm);
  decode->callback([&] {
    beam.length_normalize = !no_norm;
    run_decode(ckpt, dvp, input, output, beam);
  });

  std::string sys_file, ref_file, report_file;
  auto* evaluate = app.add_subcommand("evaluate", "ROUGE-1/2/L between system and reference files");
  evaluate->add_option("--system", sys_file)->required();
  evaluate->add_option("--reference", ref_file)->required();
  evaluate->add_option("--output", report_file);
  evaluate->callback([&] {
    const auto pairs = read_pairs(sys_file, ref_file);
    if (pairs.empty()) throw std::runtime_error("no sentence pairs to evaluate");
    const auto table = format_rouge_table(corpus_rouge(pairs));
    if (report_file.empty()) out << table;
    else write_text(report_file, table);
  });

  auto* diagnose = app.add_subcommand("diagnose", "Repeat and length-deficit counts per sentence");
  diagnose->add_option("--system", sys_file)->required();
  diagnose->add_option("--reference", ref_file)->required();
  diagnose->add_option("--output", report_file);
  diagnose->callback([&] {
    const auto report = format_oddgen_report(oddgen_report(read_pairs(sys_file, ref_file)));
    if (report_file.empty()) out << report;
    else write_text(report_file, report);
  });

  std::string align_src, align_tgt, align_dir, pairs_file;
  VocabPaths avp;
  auto* align = app.add_subcommand("align", "Export attention and SPM alignment matrices");
  align->add_option("--checkpoint", ckpt)->required();
  avp.add_to(align);
  align->add_option("--source", align_src)->required();
  align->add_option("--target", align_tgt)->required();
  align->add_option("--out-dir", align_dir)->required();
  align->add_option("--pairs", pairs_file, "Write harvested (target, SPM argmax) pair counts here");
  align->callback([&] { run_align(ckpt, avp, align_src, align_tgt, align_dir, pairs_file, err); });

  CopyDeletionConfig toy;
  std::string toy_prefix;
  auto* gen = app.add_subcommand("gen-toy", "Write a synthetic copy-with-deletion corpus");
  gen->add_option("--pairs", toy.pairs)->capture_default_str();
  gen->add_option("--vocab-size", toy.vocab)->capture_default_str();
  gen->add_option("--deletion-rate", toy.deletion_rate)->capture_default_str();
  gen->add_option("--min-length", toy.min_length)->capture_default_str();
  gen->add_option("--max-length", toy.max_length)->capture_default_str();
  gen->add_option("--seed", toy.seed)->capture_default_str();
  gen->add_option("--out-prefix", toy_prefix)->required();
  gen->callback([&] {
    const auto task = generate_copy_deletion(toy);
    std::string src, tgt, al;
    for (const auto& p : task.pairs) {
      src += join_words(p.source) + "\n";
      tgt += join_words(p.target) + "\n";
      for (std::size_t k = 0; k < p.kept.size(); ++k) al += (k ? " " : "") + std::to_string(p.kept[k] + 1);
      al += "\n";
    }
    write_text(toy_prefix + ".src", src);
    write_text(toy_prefix + ".tgt", tgt);
    write_text(toy_prefix + ".align", al);
  });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << "\n";
    return 1;
  }
  return 0;
}

}  // namespace spm::cli
