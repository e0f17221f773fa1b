#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "xct/crosscoder.hpp"
#include "xct/pipeline.hpp"
#include "xct/serialize.hpp"

using namespace xct;
namespace fs = std::filesystem;

namespace {

// A deliberately tiny pipeline configuration that exercises every command.
Config mini_config(const std::string& root) {
    Config cfg = default_config();
    cfg.set("run", "id", "mini");
    cfg.set("run", "out_root", root);
    cfg.set("run", "seeds", "124");
    cfg.set("corpus", "train_tokens", "60000");
    cfg.set("pairs", "n_per_subtask", "30");
    cfg.set("lm", "n_layers", "2");
    cfg.set("lm", "d_model", "32");
    cfg.set("lm", "n_heads", "4");
    cfg.set("lm", "context_len", "32");
    cfg.set("lm", "mid_layer", "1");
    cfg.set("lm_train", "batch_seqs", "8");
    cfg.set("lm_train", "schedule", "0,8,64");
    cfg.set("extract", "sources", "step:0,step:8,last");
    cfg.set("extract", "train_tokens", "6000");
    cfg.set("extract", "val_tokens", "1200");
    cfg.set("xc", "dict_size", "64");
    cfg.set("xc", "steps", "40");
    cfg.set("xc", "batch_tokens", "512");
    cfg.set("xc", "lr", "3e-4");
    cfg.set("attr", "threshold", "0");  // the mini run's IEs are tiny
    cfg.set("attr", "exact_top_k", "8");
    cfg.set("validate", "k", "8");
    return cfg;
}

struct TempRoot {
    fs::path path;
    explicit TempRoot(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempRoot() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("the whole pipeline runs end to end on a tiny config") {
    TempRoot root("xct_cli_pipeline");
    Config cfg = mini_config(root.str());

    for (const auto& cmd : command_names()) {
        CommandResult r = run_command(cmd, cfg, false);
        CHECK_FALSE(r.up_to_date);
        CHECK_FALSE(r.outputs.empty());
    }

    const std::string run = root.str() + "/mini";
    for (const char* rel :
         {"corpus/train.xtok", "corpus/vocab.tsv", "pairs/eval.tsv", "lm/checkpoints.tsv",
          "acts/norms.tsv", "attr/table_all.tsv", "reports/accuracy.tsv", "reports/heatmap.tsv",
          "reports/transitions.tsv", "reports/xc_eval.tsv", "reports/validation_summary.tsv",
          "reports/ternary.tsv", "reports/ie_evolution.tsv", "reports/annotations.txt"})
        CHECK_MESSAGE(fs::exists(run + "/" + rel), rel);

    // The three-source flag plumbing produced a triplet crosscoder.
    CrosscoderParams p = load_crosscoder(run + "/xc/xc.seed124.xccx");
    CHECK(p.sources.size() == 3);

    // Re-running a command without changes is a no-op.
    CommandResult again = run_command("attribute", cfg, false);
    CHECK(again.up_to_date);
    CommandResult forced = run_command("attribute", cfg, true);
    CHECK_FALSE(forced.up_to_date);

    // Changing a config knob invalidates only the affected command.
    Config cfg2 = cfg;
    cfg2.set("attr", "n_steps", "5");
    CommandResult changed = run_command("attribute", cfg2, false);
    CHECK_FALSE(changed.up_to_date);
}

TEST_CASE("missing inputs fail fast with the full list") {
    TempRoot root("xct_cli_missing");
    Config cfg = mini_config(root.str());
    try {
        run_command("attribute", cfg, false);
        FAIL("expected MissingInputError");
    } catch (const MissingInputError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("pairs/eval.tsv") != std::string::npos);
        CHECK(msg.find("xc/xc.seed124.xccx") != std::string::npos);
    }
}

TEST_CASE("tampered inputs trigger a provenance error") {
    TempRoot root("xct_cli_tamper");
    Config cfg = mini_config(root.str());
    run_command("gen-corpus", cfg, false);
    // Corrupt the corpus behind the manifest's back.
    {
        std::ofstream f(root.str() + "/mini/corpus/train.xtok",
                        std::ios::binary | std::ios::app);
        f << "tamper";
    }
    CHECK_THROWS_AS(run_command("train-lm", cfg, false), ProvenanceError);
}

TEST_CASE("empty extract sources demand an explicit choice") {
    TempRoot root("xct_cli_sources");
    Config cfg = mini_config(root.str());
    cfg.set("extract", "sources", "");
    run_command("gen-corpus", cfg, false);
    try {
        run_command("extract", cfg, false);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("report --stage checkpoints") != std::string::npos);
    }
}

TEST_CASE("XCT_RUN_ROOT overrides the configured output root") {
    TempRoot cfg_root("xct_cli_root_a");
    TempRoot env_root("xct_cli_root_b");
    Config cfg = mini_config(cfg_root.str());
    ::setenv("XCT_RUN_ROOT", env_root.str().c_str(), 1);
    run_command("gen-corpus", cfg, false);
    ::unsetenv("XCT_RUN_ROOT");
    CHECK(fs::exists(env_root.path / "mini/corpus/train.xtok"));
    CHECK_FALSE(fs::exists(cfg_root.path / "mini/corpus/train.xtok"));
}

TEST_CASE("config precedence: overrides beat the file which beats defaults") {
    Config cfg = default_config();
    CHECK(cfg.get("xc", "l1_coeff", "") == "2");
    Config file = Config::parse("[xc]\nl1_coeff = 3\n");
    cfg.apply(file);
    CHECK(cfg.get("xc", "l1_coeff", "") == "3");
    cfg.set_dotted("xc.l1_coeff=4");
    CHECK(cfg.get("xc", "l1_coeff", "") == "4");
}

TEST_CASE("default crosscoder hyperparameters carry the published values") {
    Config cfg = default_config();
    CHECK(cfg.get_double("xc", "lr", 0) == doctest::Approx(5e-5));
    CHECK(cfg.get_double("xc", "l1_coeff", 0) == doctest::Approx(2.0));
    CHECK(cfg.get_double("xc", "warmup_fraction", 0) == doctest::Approx(0.05));
    CHECK(cfg.get_double("xc", "dec_init_norm", 0) == doctest::Approx(0.08));
    CHECK(cfg.get_double("xc", "beta1", 0) == doctest::Approx(0.9));
    CHECK(cfg.get_double("xc", "beta2", 0) == doctest::Approx(0.999));
    CHECK(cfg.get_int("xc", "batch_tokens", 0) == 4096);
    CHECK(cfg.get("run", "seeds", "") == "124,153,6582");
    CHECK(cfg.get_int("attr", "n_steps", 0) == 10);
    CHECK(cfg.get_double("attr", "threshold", 0) == doctest::Approx(0.1));
}

TEST_CASE("the shipped default config file matches the built-in defaults") {
    Config builtin = default_config();
    Config file = Config::load(std::string(XCT_SOURCE_DIR) + "/configs/default.ini");
    for (auto& [section, kv] : file.sections())
        for (auto& [key, value] : kv)
            CHECK_MESSAGE(builtin.get(section, key, "<unset>") == value,
                          section << "." << key << " = " << value);
}
