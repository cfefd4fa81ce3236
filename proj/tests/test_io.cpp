// Metrics, image/dataset I/O, synthetic data, checkpoints and config parsing.

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "futh/config.hpp"
#include "futh/io/dataset.hpp"
#include "futh/metrics.hpp"
#include "futh/persistence.hpp"
#include "futh/pipeline.hpp"
#include "test_util.hpp"

using namespace futh;
using futh::test::random_mask;

namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("futh_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

TEST(Metrics, CountArithmetic) {
    const Tensor<double> p(Shape{1, 6}, {1, 1, 1, 0, 0, 0});
    const Tensor<double> g(Shape{1, 6}, {0, 1, 1, 1, 0, 0});
    EXPECT_DOUBLE_EQ(metrics::dice(p, g), 4.0 / 6.0);
    EXPECT_DOUBLE_EQ(metrics::iou(p, g), 0.5);
    EXPECT_DOUBLE_EQ(metrics::mae(p, g), 2.0 / 6.0);
}

TEST(Metrics, IdentityDisjointAndEmpty) {
    Rng rng(1);
    auto m = random_mask({1, 8, 8}, rng);
    m[0] = 1.0;
    EXPECT_EQ(metrics::dice(m, m), 1.0);
    EXPECT_EQ(metrics::iou(m, m), 1.0);
    EXPECT_EQ(metrics::mae(m, m), 0.0);
    Tensor<double> inv(m.shape());
    for (std::size_t i = 0; i < m.size(); ++i) inv[i] = 1.0 - m[i];
    EXPECT_EQ(metrics::dice(m, inv), 0.0);
    EXPECT_EQ(metrics::iou(m, inv), 0.0);
    const Tensor<double> z(Shape{1, 4, 4});
    EXPECT_EQ(metrics::dice(z, z), 1.0);
    EXPECT_EQ(metrics::iou(z, z), 1.0);
}

TEST(Metrics, ThresholdAtHalf) {
    const Tensor<double> p(Shape{3}, {0.5, 0.4999, 0.9});
    const Tensor<double> g(Shape{3}, {1, 1, 0});
    const auto c = metrics::count(p, g);
    EXPECT_EQ(c.pred, 2u);
    EXPECT_EQ(c.both, 1u);
}

TEST(Metrics, ReportMeansArePerImage) {
    metrics::MetricReport r;
    r.add("a", 1.0, 1.0, 0.0);
    r.add("b", 0.5, 0.25, 0.2);
    r.finalize();
    EXPECT_DOUBLE_EQ(r.mean_dice, 0.75);
    EXPECT_DOUBLE_EQ(r.mean_iou, 0.625);
    EXPECT_DOUBLE_EQ(r.mean_mae, 0.1);
    EXPECT_THROW(metrics::dice(Tensor<double>(Shape{2}), Tensor<double>(Shape{3})), ShapeError);
}

TEST(Image, PgmReadAndBinarize) {
    const auto dir = scratch_dir("pgm");
    {
        std::ofstream f(dir / "m.pgm", std::ios::binary);
        f << "P5\n# comment\n2 2\n255\n";
        const unsigned char px[4] = {0, 255, 127, 128};
        f.write(reinterpret_cast<const char*>(px), 4);
    }
    const auto img = io::read_image(dir / "m.pgm");
    EXPECT_EQ(img.width, 2u);
    EXPECT_EQ(img.channels, 1u);
    EXPECT_EQ(io::binarize_mask(img).vec(), (std::vector<float>{0, 1, 0, 1}));
    EXPECT_THROW(io::read_image(dir / "missing.pgm"), io::ImageError);
    EXPECT_THROW(io::read_image(dir / "x.bmp"), io::ImageError);
}

TEST(Image, PnmRoundTripAndResize) {
    const auto dir = scratch_dir("pnm");
    io::Image8 img{3, 2, 3, {0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160, 170}};
    io::write_pnm(dir / "a.ppm", img);
    const auto back = io::read_image(dir / "a.ppm");
    EXPECT_EQ(back.pixels, img.pixels);
    const auto same = io::resize_nearest(img, 3, 2);
    EXPECT_EQ(same.pixels, img.pixels);
    const auto t = io::resize_bilinear<double>(img, 3, 2);
    EXPECT_NEAR(t.at({1, 0, 2}), 70.0 / 255.0, 1e-12);
}

TEST(Dataset, EmptyDirectoryGivesNoSamples) {
    EXPECT_TRUE(io::load_dataset(scratch_dir("empty"), 16).empty());
}

TEST(Dataset, LoadsPairsInLexicographicOrder) {
    const auto dir = scratch_dir("pairs");
    auto samples = io::synth_dataset(3, 16, 11);
    samples[0].id = "c";
    samples[1].id = "a";
    samples[2].id = "b";
    io::save_dataset(dir, samples);
    const auto loaded = io::load_dataset(dir, 16);
    ASSERT_EQ(loaded.size(), 3u);
    EXPECT_EQ(loaded[0].id, "a");
    EXPECT_EQ(loaded[2].id, "c");
    EXPECT_EQ(loaded[0].mask, samples[1].mask);
    EXPECT_LT(max_abs_diff(loaded[0].image, samples[1].image), 0.5f / 255.0f + 1e-6f);
    EXPECT_EQ(loaded[1].image.shape(), (Shape{3, 16, 16}));

    const auto resized = io::load_dataset(dir, 32);
    EXPECT_EQ(resized[0].mask.shape(), (Shape{1, 32, 32}));
}

TEST(Dataset, MissingMaskIsNamed) {
    const auto dir = scratch_dir("missing");
    io::save_dataset(dir, io::synth_dataset(2, 16, 1));
    fs::remove(dir / "masks" / "synth_00001.pgm");
    try {
        io::load_dataset(dir, 16);
        FAIL() << "expected DatasetError";
    } catch (const io::DatasetError& e) {
        EXPECT_NE(std::string(e.what()).find("synth_00001"), std::string::npos);
    }
}

TEST(Dataset, UnreadableFileIsNamed) {
    const auto dir = scratch_dir("broken");
    io::save_dataset(dir, io::synth_dataset(1, 16, 1));
    std::ofstream(dir / "images" / "synth_00000.ppm") << "garbage";
    try {
        io::load_dataset(dir, 16);
        FAIL() << "expected DatasetError";
    } catch (const io::DatasetError& e) {
        EXPECT_NE(std::string(e.what()).find("synth_00000"), std::string::npos);
    }
}

TEST(Synth, DeterministicPerSeed) {
    const auto a = io::synth_dataset(4, 32, 9), b = io::synth_dataset(4, 32, 9), c = io::synth_dataset(4, 32, 10);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(a[i].image, b[i].image);
        EXPECT_EQ(a[i].mask, b[i].mask);
    }
    EXPECT_FALSE(a[0].image == c[0].image);
}

TEST(Synth, MasksBinaryNonEmptyAndBelowHalfOverThousandSeeds) {
    std::size_t small = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const auto s = io::synth_dataset(1, 64, seed).front();
        double area = 0;
        for (float v : s.mask.data()) {
            ASSERT_TRUE(v == 0.0f || v == 1.0f);
            area += v;
        }
        const double ratio = area / 4096.0;
        EXPECT_GT(ratio, 0.0) << "seed " << seed;
        EXPECT_LT(ratio, 0.5) << "seed " << seed;
        small += ratio < 0.03;
        for (float v : s.image.data()) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
    }
    EXPECT_GT(small, 100u);  // small targets are well represented
}

TEST(Batches, PreserveOrderAndRemainder) {
    const auto samples = io::synth_dataset(5, 16, 2);
    const auto batches = io::make_batches<float>(samples, 2);
    ASSERT_EQ(batches.size(), 3u);
    EXPECT_EQ(batches[2].images.shape(), (Shape{1, 3, 16, 16}));
    EXPECT_EQ(batches[1].masks[0], samples[2].mask[0]);
    EXPECT_THROW(io::make_batches<float>(samples, 0), ContractError);
}

TEST(Checkpoint, RoundTripBitwise) {
    Rng rng(3);
    const auto a = Tensor<float>::normal({3, 4}, rng);
    const auto b = Tensor<double>::normal({2, 1, 5}, rng);
    io::CheckpointWriter w;
    w.add("a", a);
    w.add("b", b);
    const auto bytes = w.bytes();
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FUTH");
    const auto back = io::parse_checkpoint(bytes);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].name, "a");
    EXPECT_EQ(back[0].dtype, io::DType::f32);
    EXPECT_EQ(back[0].as<float>(), a);
    EXPECT_EQ(back[1].as<double>(), b);
}

TEST(Checkpoint, HeaderLayout) {
    io::CheckpointWriter w;
    w.add("xy", Tensor<float>(Shape{2}, {1.0f, 2.0f}));
    const auto bytes = w.bytes();
    // magic 4 + version 4 + count 4 + name len 2 + name 2 + dtype 1 + rank 1 + dim 4 + payload 8 + crc 4
    ASSERT_EQ(bytes.size(), 34u);
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[8], 1);
    EXPECT_EQ(bytes[12], 2);
    EXPECT_EQ(bytes[16], 0);
    EXPECT_EQ(bytes[17], 1);
    EXPECT_EQ(bytes[18], 2);
    EXPECT_EQ(io::crc32_of(bytes.data(), 30),
              static_cast<std::uint32_t>(bytes[30] | bytes[31] << 8 | bytes[32] << 16 | bytes[33] << 24));
}

TEST(Checkpoint, EverySingleByteCorruptionDetected) {
    Rng rng(4);
    io::CheckpointWriter w;
    w.add("t", Tensor<float>::normal({4, 4}, rng));
    const auto bytes = w.bytes();
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        auto bad = bytes;
        bad[i] ^= 0x5A;
        EXPECT_THROW(io::parse_checkpoint(bad), io::CheckpointError) << "byte " << i;
    }
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(io::parse_checkpoint(truncated), io::CheckpointError);
}

TEST(Persistence, ModelRoundTripRestoresEverything) {
    const auto dir = scratch_dir("persist");
    FuTransHNet<float> a(futh::test::tiny_config(1));
    {
        // move the batch-norm buffers away from their initial values
        AdamConfig cfg;
        cfg.lr = 1e-3;
        CoopTrainer<float> t(a, 1.0, cfg);
        t.train_epoch(io::make_batches<float>(io::synth_dataset(2, 32, 1), 2));
    }
    const ViewWeights w{{0.2, 0.3, 0.5}, 1.0};
    save_model(dir / "m.ckpt", a, w);
    FuTransHNet<float> b(futh::test::tiny_config(2));
    const auto wb = load_model(dir / "m.ckpt", b);
    EXPECT_EQ(wb.w, w.w);
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
    const auto ba = a.buffers(), bb = b.buffers();
    for (std::size_t i = 0; i < ba.size(); ++i) EXPECT_EQ(*ba[i].tensor, *bb[i].tensor);
    EXPECT_EQ(model_checkpoint(a, w).bytes(), model_checkpoint(b, w).bytes());

    auto cfg = futh::test::tiny_config(1);
    cfg.fusion.dfm_on = false;
    FuTransHNet<float> other(cfg);
    EXPECT_THROW(load_model(dir / "m.ckpt", other), io::CheckpointError);
}

TEST(Config, ParsesKeysCommentsAndRejectsUnknown) {
    RunConfig cfg;
    std::istringstream in("# toy\nimage_size = 64\ndepth=2  # shallow\nlr = 2.8e-4\nglff = off\nhead_upsample = nearest\n"
                          "\nseed = 7\nc16 = 128\n");
    parse_config(cfg, in);
    EXPECT_EQ(cfg.model.image_size, 64u);
    EXPECT_EQ(cfg.model.encoder.depth, 2u);
    EXPECT_DOUBLE_EQ(cfg.adam.lr, 2.8e-4);
    EXPECT_FALSE(cfg.model.fusion.glff_on);
    EXPECT_EQ(cfg.model.head_upsample, HeadUpsample::nearest);
    EXPECT_EQ(cfg.seed, 7u);
    EXPECT_EQ(cfg.model.seed, 7u);
    EXPECT_EQ(cfg.model.fusion.channels[0], 128u);
    EXPECT_NO_THROW(cfg.validate());

    RunConfig bad;
    std::istringstream unknown("colour = red\n");
    EXPECT_THROW(parse_config(bad, unknown), ConfigError);
    std::istringstream malformed("image_size 64\n");
    EXPECT_THROW(parse_config(bad, malformed), ConfigError);
    std::istringstream junk("epochs = 3x\n");
    EXPECT_THROW(parse_config(bad, junk), ConfigError);
}

TEST(Config, ValidationRules) {
    RunConfig cfg;
    cfg.model.image_size = 50;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = RunConfig{};
    cfg.lambda = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = RunConfig{};
    cfg.epochs = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_NO_THROW(RunConfig{}.validate());
}

TEST(Pipeline, FixedBudgetRunsEveryEpoch) {
    RunConfig cfg;
    cfg.model = futh::test::tiny_config(3);
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.synth_count = 2;
    const auto data = io::synth_dataset(2, cfg.model.image_size, 4);
    FuTransHNet<float> model(cfg.model);
    std::vector<std::size_t> seen;
    train<float>(cfg, model, data, [&](std::size_t e, const EpochReport&, const CoopTrainer<float>&) { seen.push_back(e); });
    EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Pipeline, EarlyStopOnPlateau) {
    RunConfig cfg;
    cfg.model = futh::test::tiny_config(3);
    cfg.epochs = 50;
    cfg.batch_size = 2;
    cfg.adam.lr = 1e-12;  // objective is flat to far below min_delta
    cfg.early_stop_patience = 2;
    cfg.early_stop_min_delta = 1e-3;
    const auto data = io::synth_dataset(2, cfg.model.image_size, 4);
    FuTransHNet<float> model(cfg.model);
    std::size_t last = 0;
    const auto w = train<float>(cfg, model, data, [&](std::size_t e, const EpochReport&, const CoopTrainer<float>&) { last = e; });
    EXPECT_EQ(last, 3u);  // epoch 1 sets the best, two stale epochs follow
    EXPECT_NEAR(w[0] + w[1] + w[2], 1.0, 1e-12);
}

TEST(Pipeline, SourceWeightsSelectOneView) {
    const ViewWeights d{{0.2, 0.3, 0.5}, 1.0};
    EXPECT_EQ(source_weights(d, 0).w, d.w);
    EXPECT_EQ(source_weights(d, 2).w, (std::vector<double>{0, 1, 0}));
    EXPECT_THROW(source_weights(d, 4), ConfigError);
}

TEST(Pipeline, MasksScoredAgainstThemselves) {
    const auto data = io::synth_dataset(3, 32, 9);
    metrics::MetricReport rep;
    for (const auto& s : data) {
        const auto sc = metrics::score(s.id, s.mask, s.mask);
        rep.add(sc.id, sc.dice, sc.iou, sc.mae);
    }
    rep.finalize();
    EXPECT_EQ(rep.mean_dice, 1.0);
    EXPECT_EQ(rep.mean_iou, 1.0);
    EXPECT_EQ(rep.mean_mae, 0.0);
}

}  // namespace
