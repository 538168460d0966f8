#include "idreamrec/cli.hpp"

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "idreamrec/binary_io.hpp"
#include "idreamrec/data.hpp"
#include "idreamrec/embedding_space.hpp"
#include "idreamrec/error.hpp"
#include "idreamrec/generation.hpp"
#include "idreamrec/service.hpp"
#include "idreamrec/tem.hpp"
#include "idreamrec/training.hpp"

namespace idr {

namespace fs = std::filesystem;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDimension = 3;
constexpr int kExitDiverged = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " path is required");
  if (!fs::exists(path)) throw UsageError(what + " not found: " + path);
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      const long long v = std::stoll(tok);
      if (v < 1) throw std::invalid_argument("k");
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("--k expects a comma-separated list of positive integers, got '" + s + "'");
    }
  }
  if (ks.empty()) throw UsageError("--k is empty");
  return ks;
}

std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

/// Path of `target` as seen from the directory holding `from_file`.
std::string relative_to_file(const std::string& target, const std::string& from_file) {
  if (target.empty()) return target;
  const fs::path t = fs::absolute(target).lexically_normal();
  const fs::path base = fs::absolute(from_file).parent_path().lexically_normal();
  const fs::path rel = t.lexically_relative(base);
  return rel.empty() ? t.string() : rel.generic_string();
}

struct IntentionOptions {
  std::string table;
  std::string endpoint;
  std::string model;
  std::string cache_dir;
  std::string api_key_env = "IDR_EMBED_API_KEY";

  void attach(CLI::App* cmd) {
    cmd->add_option("--intentions", table, "JSON table of precomputed intention embeddings");
    cmd->add_option("--embed-endpoint", endpoint, "text-embedding endpoint URL");
    cmd->add_option("--embed-model", model, "text-embedding model name");
    cmd->add_option("--cache-dir", cache_dir, "embedding cache directory");
    cmd->add_option("--api-key-env", api_key_env, "environment variable holding the API key");
  }

  IntentionResolver build() const {
    if (!table.empty()) {
      require_file(table, "intention table");
      auto t = std::make_shared<IntentionTable>(IntentionTable::load(table));
      return [t](const std::string& text) {
        const auto it = t->vectors.find(text);
        if (text.empty()) throw Error(ErrorCode::kInvalidInput, "intention text is empty");
        if (it == t->vectors.end()) throw Error(ErrorCode::kInvalidInput, "no embedding for intention text: " + text);
        return it->second;
      };
    }
    if (!endpoint.empty()) {
      EmbedClientConfig cfg;
      cfg.endpoint = endpoint;
      cfg.model = model;
      cfg.cache_dir = cache_dir;
      cfg.api_key_env = api_key_env;
      auto client = std::make_shared<EmbeddingClient>(cfg, make_http_transport());
      return [client](const std::string& text) {
        if (text.empty()) throw Error(ErrorCode::kInvalidInput, "intention text is empty");
        const EmbeddingMatrix m = client->fetch({text});
        return std::vector<double>(m.vectors.data.begin(), m.vectors.data.end());
      };
    }
    return {};
  }
};

int cmd_synth(const fs::path& out_dir, const SynthSpec& spec, const std::string& transform_kind, std::ostream& out) {
  fs::create_directories(out_dir);
  const SynthData data = synth_generate(spec);
  save_embeddings((out_dir / "embeddings.idre").string(), data.embeddings);
  write_interactions_tsv(data.log, (out_dir / "interactions.tsv").string());
  write_sequences_jsonl(data.dataset, (out_dir / "sequences.jsonl").string());
  {
    std::ofstream titles(out_dir / "titles.tsv");
    for (std::size_t i = 0; i < data.embeddings.count(); ++i) {
      titles << i << "\titem " << i << " (cluster " << i % spec.clusters << ")\n";
    }
  }
  const LinearTransform tr = fit_transform(data.embeddings, parse_transform_kind(transform_kind));
  save_transform(tr, (out_dir / "transform.idrt").string());
  {
    std::ofstream cfg(out_dir / "train.cfg");
    cfg << "# synthetic quickstart\n"
        << "dataset = sequences.jsonl\n"
        << "embeddings = embeddings.idre\n"
        << "transform = transform.idrt\n"
        << "checkpoint = model.idrm\n"
        << "report = report.json\n";
  }
  out << "wrote synthetic data (" << data.embeddings.count() << " items, " << data.dataset.pairs.size()
      << " pairs) to " << out_dir.string() << "\n";
  return 0;
}

int cmd_prepare(const std::string& interactions, const std::string& embeddings, std::int64_t num_items, int k_core,
                const std::string& out_path, std::ostream& out) {
  require_file(interactions, "interaction log");
  std::int64_t pad = num_items;
  if (!embeddings.empty()) {
    require_file(embeddings, "embedding file");
    pad = static_cast<std::int64_t>(load_embedding_store(embeddings).count);
  }
  if (pad <= 0) throw UsageError("prepare needs --embeddings or --num-items to fix the pad id");
  const InteractionLog raw = read_interactions_tsv(interactions);
  for (const auto& r : raw.records) {
    if (r.item < 0 || r.item >= pad) {
      throw Error(ErrorCode::kDimensionMismatch, "item id " + std::to_string(r.item) + " outside catalog of " +
                                                     std::to_string(pad));
    }
  }
  const InteractionLog kept = k_core_filter(raw, k_core);
  const SequenceDataset ds = split_8_1_1(build_sequences(kept, pad));
  write_sequences_jsonl(ds, out_path);
  out << "interactions " << raw.records.size() << " -> " << kept.records.size() << " after " << k_core
      << "-core; pairs train/valid/test " << ds.count(Split::kTrain) << "/" << ds.count(Split::kValid) << "/"
      << ds.count(Split::kTest) << "\n";
  return 0;
}

int cmd_fit_transform(const std::string& embeddings, const std::string& kind, std::optional<double> scale,
                      double eig_floor, const std::string& out_path, const std::string& transformed_out,
                      std::ostream& out) {
  require_file(embeddings, "embedding file");
  const EmbeddingMatrix e = load_embeddings(embeddings);
  const LinearTransform tr = fit_transform(e, parse_transform_kind(kind), scale, eig_floor);
  save_transform(tr, out_path);
  if (!transformed_out.empty()) save_embeddings(transformed_out, apply_transform(tr, e));
  out << "fitted " << to_string(tr.kind) << " transform (d=" << tr.dim() << ", floored eigenvalues "
      << tr.floored_eigenvalues << ") -> " << out_path << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              std::optional<std::uint64_t> seed, std::ostream& out) {
  if (!fs::exists(config_path)) throw UsageError("config file not found: " + config_path);
  KeyValueConfig kv = KeyValueConfig::load(config_path);
  for (const auto& o : overrides) kv.set(o);
  if (seed) kv.values["seed"] = std::to_string(*seed);
  const TrainConfig cfg = train_config_from(kv);

  const fs::path base = fs::path(config_path).parent_path();
  auto key = [&](const std::string& k, const std::string& fallback) {
    auto it = kv.values.find(k);
    return resolve(base, it == kv.values.end() ? fallback : it->second);
  };
  const std::string dataset_path = key("dataset", "");
  const std::string emb_path = key("embeddings", "");
  const std::string tr_path = key("transform", "");
  const std::string ck_path = key("checkpoint", "model.idrm");
  const std::string report_path = key("report", "report.json");
  require_file(dataset_path, "dataset");
  require_file(emb_path, "embedding file");
  if (!tr_path.empty()) require_file(tr_path, "transform");

  const EmbeddingMatrix raw = load_embeddings(emb_path);
  EmbeddingMatrix catalog = raw;
  if (!tr_path.empty()) {
    const LinearTransform tr = load_transform(tr_path);
    if (tr.dim() != raw.dim()) {
      throw Error(ErrorCode::kDimensionMismatch, "transform dimension " + std::to_string(tr.dim()) +
                                                     " vs embedding dimension " + std::to_string(raw.dim()));
    }
    catalog = apply_transform(tr, raw);
  }
  const SequenceDataset ds = read_sequences_jsonl(dataset_path, static_cast<std::int64_t>(catalog.count()));

  TrainResult result = train(ds, catalog, cfg);
  Checkpoint ck{std::move(result.model), result.schedule, relative_to_file(emb_path, ck_path),
                relative_to_file(tr_path, ck_path), cfg.seed};
  if (const auto dir = fs::path(ck_path).parent_path(); !dir.empty()) fs::create_directories(dir);
  save_checkpoint(ck, ck_path);
  write_file_atomic(report_path, result.report.to_json());
  out << "trained " << result.report.epoch_loss.size() << " epochs (best " << result.report.best_epoch
      << ", final loss " << result.report.epoch_loss.back() << ") in " << result.report.wall_seconds
      << " s -> " << ck_path << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, dataset, embeddings, transform, json_out, split = "test", ks = "5,10";
  int steps = 1;
  double w = 0.0, rho = 0.0;
  std::optional<std::uint64_t> seed;
  bool intention_target = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.dataset, "dataset");
  const std::vector<std::size_t> ks = parse_ks(a.ks);
  const ModelBundle b = load_bundle(a.checkpoint, a.embeddings, a.transform);
  const SequenceDataset ds = read_sequences_jsonl(a.dataset, b.pad_id);
  for (const auto& p : ds.pairs) {
    if (p.target < 0 || p.target >= b.pad_id) {
      throw Error(ErrorCode::kDimensionMismatch, "dataset target " + std::to_string(p.target) +
                                                     " outside catalog of " + std::to_string(b.pad_id));
    }
  }
  const std::vector<SequencePair> cases = ds.subset(parse_split(a.split));
  if (cases.empty()) throw UsageError("dataset has no '" + a.split + "' pairs");
  if (a.steps < 1 || a.steps > b.schedule.steps) throw UsageError("--steps must be in [1, T]");

  EvalSettings s;
  s.ks = ks;
  s.plan = make_plan(b.schedule.steps, a.steps);
  s.w = a.w;
  s.rho = a.rho;
  s.seed = a.seed.value_or(b.seed);
  if (a.intention_target) {
    s.intention = [&b](const SequencePair& p) -> std::optional<std::vector<double>> {
      const auto e = b.catalog.item(static_cast<std::size_t>(p.target));
      return std::vector<double>(e.begin(), e.end());
    };
  }
  const EvalResult r = evaluate(b.model, b.schedule, cases, b.catalog, b.pad_id, s);
  out << metrics_tsv(r.rows);
  if (!a.json_out.empty()) write_file_atomic(a.json_out, metrics_json(r.rows, a.steps, a.w, a.rho));
  return 0;
}

std::vector<std::int64_t> parse_ids(const std::string& s) {
  std::vector<std::int64_t> ids;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      ids.push_back(std::stoll(tok));
    } catch (const std::exception&) {
      throw UsageError("--history expects comma-separated item ids, got '" + s + "'");
    }
  }
  return ids;
}

int cmd_embed(const std::string& texts_path, EmbedClientConfig cfg, const std::string& dtype,
              const std::string& out_path, std::ostream& out) {
  require_file(texts_path, "text file");
  if (cfg.endpoint.empty()) throw UsageError("--endpoint is required");
  std::ifstream in(texts_path);
  std::vector<std::string> texts;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    texts.push_back(line);
  }
  EmbeddingClient client(cfg, make_http_transport());
  const EmbeddingMatrix m = client.fetch(texts);
  save_embeddings(out_path, m, dtype == "f32" ? EmbeddingDType::kF32 : EmbeddingDType::kF64);
  out << "embedded " << texts.size() << " texts (d=" << m.dim() << ", " << client.requests_sent()
      << " requests) -> " << out_path << "\n";
  return 0;
}

std::atomic<HttpServer*> g_server{nullptr};

void on_signal(int) {
  if (HttpServer* s = g_server.load()) s->stop();
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Intention-aware diffusion recommender"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic permutation-rule dataset");
  std::string synth_dir;
  std::string synth_transform = "zca";
  SynthSpec spec;
  synth->add_option("--out-dir", synth_dir, "output directory")->required();
  synth->add_option("--items", spec.n_items);
  synth->add_option("--dim", spec.dim);
  synth->add_option("--users", spec.n_sequences);
  synth->add_option("--per-user", spec.interactions_per_user);
  synth->add_option("--clusters", spec.clusters);
  synth->add_option("--noise", spec.noise);
  synth->add_option("--seed", spec.seed);
  synth->add_option("--transform", synth_transform, "identity|scale|scale-ortho|pca|pca-o|zca");

  auto* prepare = app.add_subcommand("prepare", "k-core filter, build sequences and split 8:1:1");
  std::string prep_log, prep_emb, prep_out;
  std::int64_t prep_items = 0;
  int prep_k = 20;
  prepare->add_option("--interactions", prep_log, "TSV user<TAB>item<TAB>timestamp")->required();
  prepare->add_option("--embeddings", prep_emb, "item embedding file (fixes the pad id)");
  prepare->add_option("--num-items", prep_items, "catalog size when no embedding file is given");
  prepare->add_option("--k-core", prep_k, "minimum interactions per user and item");
  prepare->add_option("--out", prep_out, "output JSON-lines dataset")->required();

  auto* fit = app.add_subcommand("fit-transform", "fit a normal transform on item embeddings");
  std::string fit_emb, fit_kind = "zca", fit_out, fit_transformed;
  std::optional<double> fit_scale;
  double fit_floor = kDefaultEigFloor;
  fit->add_option("--embeddings", fit_emb)->required();
  fit->add_option("--kind", fit_kind, "identity|scale|scale-ortho|pca|pca-o|zca");
  fit->add_option("--scale", fit_scale, "scale factor for scale kinds");
  fit->add_option("--eig-floor", fit_floor);
  fit->add_option("--out", fit_out)->required();
  fit->add_option("--transformed-out", fit_transformed, "also write the transformed embeddings");

  auto* trn = app.add_subcommand("train", "train a denoiser from a key=value config");
  std::string train_cfg;
  std::vector<std::string> train_set;
  std::optional<std::uint64_t> train_seed;
  trn->add_option("config", train_cfg, "config file")->required();
  trn->add_option("--set", train_set, "override key=value");
  trn->add_option("--seed", train_seed);

  auto* ev = app.add_subcommand("eval", "full-ranking HR/NDCG on a dataset split");
  EvalArgs ea;
  ev->add_option("--checkpoint", ea.checkpoint)->required();
  ev->add_option("--dataset", ea.dataset)->required();
  ev->add_option("--split", ea.split, "train|valid|test");
  ev->add_option("--k", ea.ks, "comma-separated cutoffs");
  ev->add_option("--steps", ea.steps);
  ev->add_option("--w", ea.w);
  ev->add_option("--rho", ea.rho);
  ev->add_option("--seed", ea.seed);
  ev->add_option("--json", ea.json_out, "write metrics JSON here");
  ev->add_option("--embeddings", ea.embeddings, "override the checkpoint's embedding file");
  ev->add_option("--transform", ea.transform, "override the checkpoint's transform");
  ev->add_flag("--intention-target", ea.intention_target, "use each target's own embedding as the intention");

  auto* rec = app.add_subcommand("recommend", "one recommendation, printed as API JSON");
  std::string rec_ck, rec_history, rec_text, rec_titles;
  double rec_rho = 0.0, rec_w = 0.0;
  int rec_steps = 1, rec_k = 10;
  std::optional<std::uint64_t> rec_seed;
  IntentionOptions rec_int;
  rec->add_option("--checkpoint", rec_ck)->required();
  rec->add_option("--history", rec_history, "comma-separated item ids, oldest first");
  rec->add_option("--intention", rec_text, "intention text");
  rec->add_option("--rho", rec_rho);
  rec->add_option("--w", rec_w);
  rec->add_option("--steps", rec_steps);
  rec->add_option("--k", rec_k);
  rec->add_option("--seed", rec_seed);
  rec->add_option("--titles", rec_titles, "id<TAB>title sidecar");
  rec_int.attach(rec);

  auto* srv = app.add_subcommand("serve", "HTTP JSON API");
  std::string srv_ck, srv_host = "127.0.0.1", srv_titles;
  int srv_port = 8080;
  IntentionOptions srv_int;
  srv->add_option("--checkpoint", srv_ck)->required();
  srv->add_option("--host", srv_host);
  srv->add_option("--port", srv_port);
  srv->add_option("--titles", srv_titles, "id<TAB>title sidecar");
  srv_int.attach(srv);

  auto* emb = app.add_subcommand("embed", "embed one text per line through a remote endpoint");
  std::string emb_texts, emb_out, emb_dtype = "f64";
  EmbedClientConfig emb_cfg;
  emb->add_option("--texts", emb_texts)->required();
  emb->add_option("--endpoint", emb_cfg.endpoint)->required();
  emb->add_option("--model", emb_cfg.model);
  emb->add_option("--batch-size", emb_cfg.batch_size);
  emb->add_option("--retries", emb_cfg.max_retries);
  emb->add_option("--backoff-ms", emb_cfg.backoff_base_ms);
  emb->add_option("--parallel", emb_cfg.max_parallel);
  emb->add_option("--cache-dir", emb_cfg.cache_dir);
  emb->add_option("--api-key-env", emb_cfg.api_key_env);
  emb->add_option("--dtype", emb_dtype)->check(CLI::IsMember({"f32", "f64"}));
  emb->add_option("--out", emb_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_dir, spec, synth_transform, out);
    if (*prepare) return cmd_prepare(prep_log, prep_emb, prep_items, prep_k, prep_out, out);
    if (*fit) return cmd_fit_transform(fit_emb, fit_kind, fit_scale, fit_floor, fit_out, fit_transformed, out);
    if (*trn) return cmd_train(train_cfg, train_set, train_seed, out);
    if (*ev) return cmd_eval(ea, out);
    if (*emb) return cmd_embed(emb_texts, emb_cfg, emb_dtype, emb_out, out);
    if (*rec) {
      require_file(rec_ck, "checkpoint");
      auto bundle = std::make_shared<const ModelBundle>(load_bundle(rec_ck));
      RecommendService service(bundle, rec_titles.empty() ? std::map<std::int64_t, std::string>{}
                                                          : load_titles(rec_titles),
                               rec_int.build());
      nlohmann::json req{{"history", parse_ids(rec_history)}, {"rho", rec_rho}, {"w", rec_w},
                         {"steps", rec_steps}, {"k", rec_k}};
      if (!rec_text.empty()) req["intention_text"] = rec_text;
      if (rec_seed) req["seed"] = *rec_seed;
      const ApiReply reply = service.recommend(req.dump());
      if (reply.status != 200) {
        err << "recommend failed (" << reply.status << "): " << reply.body << "\n";
        return reply.status == 422 ? kExitUsage : kExitRuntime;
      }
      out << nlohmann::json::parse(reply.body).dump(2) << "\n";
      return 0;
    }
    if (*srv) {
      require_file(srv_ck, "checkpoint");
      auto bundle = std::make_shared<const ModelBundle>(load_bundle(srv_ck));
      auto service = std::make_shared<const RecommendService>(
          bundle, srv_titles.empty() ? std::map<std::int64_t, std::string>{} : load_titles(srv_titles),
          srv_int.build());
      HttpServer server(service);
      const int port = server.start(srv_host, srv_port);
      out << "serving on http://" << srv_host << ":" << port << std::endl;
      g_server.store(&server);
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server.wait();
      g_server.store(nullptr);
      return 0;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    switch (e.code()) {
      case ErrorCode::kDimensionMismatch:
        return kExitDimension;
      case ErrorCode::kDivergedTraining:
        return kExitDiverged;
      case ErrorCode::kIo:
        return kExitUsage;
      default:
        return kExitRuntime;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace idr
