// imhead command-line workbench.

#include "imhead/service.hpp"
#include "imhead/workbench.hpp"

#include "CLI11.hpp"

#include <iostream>

using namespace imhead;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

struct EditArgs {
  std::string ckpt, out, from, regions;
  int base = -1;
};

EditDocument edit_start(const Checkpoint& ck, const EditArgs& a) {
  if (!a.from.empty()) return edit_document_from_json(ck, read_json(a.from));
  return edit_base(ck, a.base);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"imhead: implicit head model workbench"};
  app.require_subcommand(1);
  std::function<void()> run;

  // synth
  SynthOptions so;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic scan dataset");
  synth->add_option("--seed", so.seed, "Random seed")->capture_default_str();
  synth->add_option("--ids", so.ids, "Number of identities")->capture_default_str();
  synth->add_option("--exprs", so.exprs, "Expressions per identity (including neutral)")->capture_default_str();
  synth->add_option("--points", so.points, "Points per scan")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->callback([&] {
    run = [&] {
      const Dataset ds = run_synth(so, synth_out);
      print({{"scans", ds.scans.size()}, {"out", synth_out}, {"config", to_json(so)}});
    };
  });

  // train
  std::string train_data, train_config, train_out;
  std::optional<std::uint64_t> train_seed;
  bool train_quiet = false;
  auto* trn = app.add_subcommand("train", "Train a model on a dataset directory");
  trn->add_option("--data", train_data, "Dataset directory")->required();
  trn->add_option("--config", train_config, "Training config JSON (missing keys use defaults)");
  trn->add_option("--out", train_out, "Checkpoint directory")->required();
  trn->add_option("--seed", train_seed, "Overrides the config seed");
  trn->add_flag("--quiet", train_quiet, "Do not stream log records to stderr");
  trn->callback([&] {
    run = [&] {
      const json cfg = train_config.empty() ? json::object() : read_json(train_config);
      const TrainResult r = run_train(train_data, cfg, train_out, train_seed, train_quiet ? nullptr : &std::cerr);
      print({{"out", train_out},
             {"seconds", r.seconds},
             {"final_train", detail::report_json(r.final_train)},
             {"final_eval", detail::report_json(r.final_eval)},
             {"config", r.checkpoint.train_config}});
    };
  });

  // fit
  std::string fit_ckpt, fit_scan, fit_out, fit_config;
  double fit_noise = 0;
  std::optional<std::uint64_t> fit_seed;
  std::optional<int> fit_iters;
  auto* fitc = app.add_subcommand("fit", "Fit latents to a PLY scan");
  fitc->add_option("--ckpt", fit_ckpt, "Checkpoint directory")->required();
  fitc->add_option("--scan", fit_scan, "PLY scan")->required()->check(CLI::ExistingFile);
  fitc->add_option("--out", fit_out, "Output JSON")->required();
  fitc->add_option("--noise", fit_noise, "Gaussian noise std added to the scan")->capture_default_str();
  fitc->add_option("--config", fit_config, "Fit config JSON");
  fitc->add_option("--seed", fit_seed, "Random seed");
  fitc->add_option("--iters", fit_iters, "Iterations");
  fitc->callback([&] {
    run = [&] {
      FitOptions fo = fit_config.empty() ? FitOptions{} : fit_options_from_json(read_json(fit_config));
      if (fit_seed) fo.seed = *fit_seed;
      if (fit_iters) fo.iters = *fit_iters;
      fo.validate();
      const Checkpoint ck = load_checkpoint(fit_ckpt);
      const json doc = run_fit(ck, fit_scan, fo, fit_noise);
      write_json(fit_out, doc);
      print({{"out", fit_out},
             {"best_loss", doc["fit"]["best_loss"]},
             {"seconds", doc["fit"]["seconds"]},
             {"converged", doc["fit"]["converged"]}});
    };
  });

  // mesh
  std::string mesh_ckpt, mesh_fit, mesh_edit, mesh_out;
  std::optional<int> mesh_id, mesh_sample;
  int mesh_res = kDefaultMeshResolution;
  auto* mesh = app.add_subcommand("mesh", "Extract a mesh with marching cubes");
  mesh->add_option("--ckpt", mesh_ckpt, "Checkpoint directory")->required();
  auto* src = mesh->add_option_group("source")->require_option(1);
  src->add_option("--identity", mesh_id, "Stored identity index");
  src->add_option("--fit", mesh_fit, "Fit result JSON");
  src->add_option("--edit", mesh_edit, "Edited identity JSON");
  mesh->add_option("--sample", mesh_sample, "Use the stored expression of this training sample");
  mesh->add_option("--res", mesh_res, "Grid resolution")->capture_default_str()->check(CLI::Range(8, 512));
  mesh->add_option("--out", mesh_out, "Output OBJ")->required();
  mesh->callback([&] {
    run = [&] {
      const Checkpoint ck = load_checkpoint(mesh_ckpt);
      MeshSource s;
      if (mesh_id) {
        s = source_from_identity(ck, *mesh_id, mesh_sample);
      } else if (!mesh_fit.empty()) {
        s = source_from_fit(ck, read_json(mesh_fit));
        if (mesh_sample) s.z_exp = ck.expression(*mesh_sample);
      } else {
        s = source_from_edit(ck, read_json(mesh_edit), mesh_sample);
      }
      const TriMesh m = run_mesh(ck, s, mesh_res);
      write_obj(mesh_out, m);
      json summary = mesh_summary(m, s, mesh_res);
      summary["out"] = mesh_out;
      if (m.empty()) std::cerr << "note: the zero level set is empty inside the grid\n";
      print(summary);
    };
  });

  // edit
  auto* edit = app.add_subcommand("edit", "Region edits on stored identities");
  edit->require_subcommand(1);
  EditArgs ea;
  auto add_base = [&](CLI::App* c) {
    c->add_option("--ckpt", ea.ckpt, "Checkpoint directory")->required();
    auto* g = c->add_option_group("base")->require_option(1);
    g->add_option("--base", ea.base, "Stored identity index");
    g->add_option("--from", ea.from, "Continue from an edit JSON");
    c->add_option("--regions", ea.regions, "Comma-separated region names")->required();
    c->add_option("--out", ea.out, "Output JSON")->required();
  };
  double sample_scale = 1.0;
  std::uint64_t sample_seed = 0;
  bool no_symmetric = false;
  auto* esample = edit->add_subcommand("sample", "Resample region embeddings from the latent statistics");
  add_base(esample);
  esample->add_option("--scale", sample_scale, "Multiple of the per-region std")->capture_default_str();
  esample->add_option("--seed", sample_seed, "Random seed")->capture_default_str();
  esample->add_flag("--no-symmetric", no_symmetric, "Do not copy the draw to the mirrored partner");
  esample->callback([&] {
    run = [&] {
      const Checkpoint ck = load_checkpoint(ea.ckpt);
      const auto doc = run_edit_sample(ck, edit_start(ck, ea), split_list(ea.regions), sample_scale, sample_seed, !no_symmetric);
      write_json(ea.out, to_json(doc));
      print({{"out", ea.out}, {"ops", doc.ops}});
    };
  });
  int swap_source = -1;
  auto* eswap = edit->add_subcommand("swap", "Copy region embeddings from another identity");
  add_base(eswap);
  eswap->add_option("--source", swap_source, "Source identity index")->required();
  eswap->callback([&] {
    run = [&] {
      const Checkpoint ck = load_checkpoint(ea.ckpt);
      const auto doc = run_edit_swap(ck, edit_start(ck, ea), swap_source, split_list(ea.regions));
      write_json(ea.out, to_json(doc));
      print({{"out", ea.out}, {"ops", doc.ops}});
    };
  });
  auto* ereset = edit->add_subcommand("reset", "Drop region overrides");
  add_base(ereset);
  ereset->callback([&] {
    run = [&] {
      const Checkpoint ck = load_checkpoint(ea.ckpt);
      const auto doc = run_edit_reset(ck, edit_start(ck, ea), split_list(ea.regions));
      write_json(ea.out, to_json(doc));
      print({{"out", ea.out}, {"ops", doc.ops}});
    };
  });
  std::string interp_ckpt, interp_out;
  int interp_a = 0, interp_b = 0;
  double interp_t = 0.5;
  auto* einterp = edit->add_subcommand("interp", "Linear blend of two identity latents");
  einterp->add_option("--ckpt", interp_ckpt, "Checkpoint directory")->required();
  einterp->add_option("--a", interp_a, "First identity")->required();
  einterp->add_option("--b", interp_b, "Second identity")->required();
  einterp->add_option("--t", interp_t, "Blend weight of b")->capture_default_str();
  einterp->add_option("--out", interp_out, "Output JSON")->required();
  einterp->callback([&] {
    run = [&] {
      const Checkpoint ck = load_checkpoint(interp_ckpt);
      const auto doc = run_edit_interp(ck, interp_a, interp_b, interp_t);
      write_json(interp_out, to_json(doc));
      print({{"out", interp_out}, {"ops", doc.ops}});
    };
  });

  // eval
  std::string ev_ckpt, ev_data, ev_report, ev_csv, ev_config;
  bool ev_spec = false, ev_warm = false;
  std::optional<double> ev_mask;
  std::optional<int> ev_iters;
  EvalOptions eo;
  SpecificityOptions spo;
  auto* ev = app.add_subcommand("eval", "Fit every scan of a dataset and report metrics");
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint directory")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--report", ev_report, "Output report JSON")->required();
  ev->add_option("--csv", ev_csv, "Also write a CSV table");
  ev->add_option("--config", ev_config, "Fit config JSON");
  ev->add_option("--iters", ev_iters, "Fit iterations");
  ev->add_option("--res", eo.resolution, "Mesh resolution")->capture_default_str()->check(CLI::Range(8, 512));
  ev->add_option("--tau", eo.tau, "F-score threshold")->capture_default_str();
  ev->add_option("--noise", eo.noise_std, "Gaussian noise std added to the scans")->capture_default_str();
  ev->add_option("--seed", eo.seed, "Random seed")->capture_default_str();
  ev->add_option("--face-mask", ev_mask, "Only score points with z >= this value");
  ev->add_flag("--warm-start", ev_warm, "Start from stored latents for training scans");
  ev->add_flag("--specificity", ev_spec, "Add the identity specificity sweep");
  ev->add_option("--spec-samples", spo.samples, "Specificity samples per std")->capture_default_str();
  ev->add_option("--spec-res", spo.resolution, "Specificity mesh resolution")->capture_default_str();
  ev->callback([&] {
    run = [&] {
      if (!ev_config.empty()) eo.fit = fit_options_from_json(read_json(ev_config));
      if (ev_iters) eo.fit.iters = *ev_iters;
      eo.fit.validate();
      eo.warm_start = ev_warm;
      if (ev_mask) eo.mask = FaceMask{*ev_mask};
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      const Dataset ds = read_dataset(ev_data);
      const MetricReport rep = run_eval(ck, ds, eo, ev_spec ? std::optional(spo) : std::nullopt);
      write_json(ev_report, to_json(rep));
      if (!ev_csv.empty()) detail::write_file(ev_csv, to_csv(rep));
      print({{"report", ev_report},
             {"chamfer", to_json(rep.summary(&ScanMetrics::chamfer))},
             {"failures", rep.failures()}});
    };
  });

  // serve
  std::string sv_ckpt, sv_host = "127.0.0.1";
  int sv_port = 8080;
  ServiceOptions sv_opt;
  auto* sv = app.add_subcommand("serve", "Run the HTTP editing service");
  sv->add_option("--ckpt", sv_ckpt, "Checkpoint directory")->required();
  sv->add_option("--port", sv_port, "TCP port")->capture_default_str()->check(CLI::Range(1, 65535));
  sv->add_option("--host", sv_host, "Bind address")->capture_default_str();
  sv->add_option("--workers", sv_opt.workers, "Job worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  sv->add_option("--cors-origin", sv_opt.cors_origin, "Allowed browser origin")->capture_default_str();
  sv->callback([&] {
    run = [&] {
      const Checkpoint ck = load_checkpoint(sv_ckpt);
      std::cerr << "serving on http://" << sv_host << ':' << sv_port << '\n';
      if (!serve(ck, sv_host, sv_port, sv_opt)) throw std::runtime_error("could not listen on port " + std::to_string(sv_port));
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }
  try {
    run();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return 0;
}
