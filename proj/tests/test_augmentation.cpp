#include <gtest/gtest.h>

#include <cmath>

#include "sidae/augmentation.hpp"
#include "sidae/data.hpp"

using namespace sidae;

namespace {

Image random_image(std::size_t c, std::size_t h, std::size_t w, SeededRng& rng) {
    Image img(c, h, w);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

// Smooth two-tone gradient: neighbouring pixels differ by well under 0.05.
Image smooth_image(std::size_t size) {
    Image img(3, size, size);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x)
                img.at(c, y, x) = static_cast<float>(0.5 + 0.4 * std::sin(0.15 * (x + 2 * y) + c));
    return img;
}

double mean(const Image& img) {
    double s = 0.0;
    for (float v : img.data) s += v;
    return s / static_cast<double>(img.data.size());
}

bool in_unit_range(const Image& img) {
    for (float v : img.data)
        if (!(v >= 0.0f && v <= 1.0f)) return false;
    return true;
}

// p +- 3 sigma of a binomial proportion over n draws.
void expect_rate(std::size_t hits, std::size_t n, double p) {
    const double rate = static_cast<double>(hits) / static_cast<double>(n);
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    EXPECT_NEAR(rate, p, 3.0 * sigma) << "hits " << hits << " of " << n;
}

}  // namespace

TEST(RandomResizedCrop, IdentityWhenPinned) {
    SeededRng rng(1);
    auto img = random_image(3, 32, 32, rng);
    auto cfg = AugmentationConfig::identity(32);
    EXPECT_EQ(random_resized_crop(img, cfg, rng), img);
}

TEST(RandomResizedCrop, ConstantImageStaysConstant) {
    SeededRng rng(2);
    Image img(3, 40, 28, 0.37f);
    auto cfg = AugmentationConfig::color(32);
    for (int i = 0; i < 50; ++i) {
        auto out = random_resized_crop(img, cfg, rng);
        ASSERT_EQ(out.height, 32u);
        for (float v : out.data) ASSERT_NEAR(v, 0.37f, 1e-6f);
    }
}

TEST(RandomResizedCrop, EmptyImageThrows) {
    SeededRng rng(3);
    EXPECT_THROW(random_resized_crop(Image(), AugmentationConfig::color(), rng), DimensionError);
}

TEST(RandomResizedCrop, ScaleDrawsUniformOnRange) {
    SeededRng rng(4);
    const auto cfg = AugmentationConfig::color(32);
    std::vector<double> draws;
    std::size_t accepted = 0;
    while (accepted < 10000) {
        auto p = sample_crop(32, 32, cfg, rng, &draws);
        ASSERT_GE(p.sampled_scale, 0.2);
        ASSERT_LE(p.sampled_scale, 1.0);
        ASSERT_LE(p.top + p.height, 32u);
        ASSERT_LE(p.left + p.width, 32u);
        ++accepted;
    }
    // Pearson chi-square over 10 equal bins of [0.2, 1.0]; 9 dof, alpha 0.01.
    std::vector<double> bins(10, 0.0);
    for (double s : draws) {
        ASSERT_GE(s, 0.2);
        ASSERT_LE(s, 1.0);
        bins[std::min<std::size_t>(9, static_cast<std::size_t>((s - 0.2) / 0.08))] += 1.0;
    }
    const double expected = static_cast<double>(draws.size()) / 10.0;
    double chi2 = 0.0;
    for (double b : bins) chi2 += (b - expected) * (b - expected) / expected;
    EXPECT_LT(chi2, 21.666);
}

TEST(RandomResizedCrop, FallbackIsCenterCrop) {
    SeededRng rng(5);
    auto cfg = AugmentationConfig::color(32);
    cfg.crop_ratio_min = cfg.crop_ratio_max = 8.0;  // never fits a 10x10 image at scale <= 1
    auto p = sample_crop(10, 10, cfg, rng);
    EXPECT_TRUE(p.fallback);
    EXPECT_EQ(p.width, 10u);
    EXPECT_EQ(p.top, (10 - p.height) / 2);
}

TEST(ColorJitter, IdentityFactors) {
    SeededRng rng(6);
    auto img = random_image(3, 8, 8, rng);
    auto out = img;
    apply_jitter(out, JitterFactors{});
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(out.data[i], img.data[i], 1e-6f);
}

TEST(ColorJitter, BrightnessZeroAndContrastOracle) {
    SeededRng rng(7);
    auto img = random_image(3, 6, 5, rng);
    auto dark = img;
    adjust_brightness(dark, 0.0);
    for (float v : dark.data) EXPECT_EQ(v, 0.0f);

    const std::size_t hw = 30;
    double m = 0.0;
    for (std::size_t i = 0; i < hw; ++i)
        m += 0.299 * img.data[i] + 0.587 * img.data[hw + i] + 0.114 * img.data[2 * hw + i];
    m /= hw;
    auto c2 = img;
    adjust_contrast(c2, 2.0);
    for (std::size_t i = 0; i < img.data.size(); ++i)
        EXPECT_NEAR(c2.data[i], std::clamp(m + 2.0 * (img.data[i] - m), 0.0, 1.0), 1e-6);
}

TEST(ColorJitter, RequiresThreeChannels) {
    SeededRng rng(8);
    Image gray(1, 4, 4, 0.5f);
    auto cfg = AugmentationConfig::color();
    cfg.jitter.probability = 1.0;
    EXPECT_THROW(color_jitter(gray, cfg, rng), DimensionError);
    EXPECT_THROW(random_grayscale(gray, cfg, rng), DimensionError);
}

TEST(ColorJitter, HueShiftOfFullTurnIsIdentity) {
    SeededRng rng(9);
    auto img = random_image(3, 5, 5, rng);
    auto out = img;
    adjust_hue(out, 1.0);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(out.data[i], img.data[i], 1e-6f);
}

TEST(Grayscale, LumaAndFixedPoint) {
    Image red(3, 1, 1);
    red.data = {1.0f, 0.0f, 0.0f};
    to_grayscale(red);
    for (float v : red.data) EXPECT_NEAR(v, 0.299f, 1e-7f);

    Image gray(3, 2, 2);
    gray.data = {0.1f, 0.5f, 0.7f, 0.9f, 0.1f, 0.5f, 0.7f, 0.9f, 0.1f, 0.5f, 0.7f, 0.9f};
    auto before = gray;
    to_grayscale(gray);
    for (std::size_t i = 0; i < gray.data.size(); ++i) EXPECT_NEAR(gray.data[i], before.data[i], 1e-6f);
}

TEST(HorizontalFlip, DefinitionInvolutionSymmetry) {
    Image two(1, 1, 2);
    two.data = {0.25f, 0.75f};
    horizontal_flip(two);
    EXPECT_EQ(two.data, (std::vector<float>{0.75f, 0.25f}));

    SeededRng rng(10);
    auto img = random_image(3, 5, 7, rng);
    auto f = img;
    horizontal_flip(f);
    horizontal_flip(f);
    EXPECT_EQ(f, img);

    Image sym(1, 2, 3);
    sym.data = {0.1f, 0.5f, 0.1f, 0.3f, 0.9f, 0.3f};
    auto s2 = sym;
    horizontal_flip(s2);
    EXPECT_EQ(s2, sym);
}

TEST(GaussianBlur, KernelNormalizedAndConstantFixed) {
    for (double sigma : {0.1, 0.7, 2.0}) {
        const auto taps = gaussian_taps(sigma, 3);
        double s = 0.0;
        for (double t : taps) s += t;
        EXPECT_NEAR(s, 1.0, 1e-15);
        EXPECT_DOUBLE_EQ(taps[0], taps[2]);
    }
    Image c(3, 9, 9, 0.6f);
    gaussian_blur(c, 1.3);
    for (float v : c.data) EXPECT_NEAR(v, 0.6f, 1e-6f);
}

TEST(GaussianBlur, ConservesMeanUnderReflectPadding) {
    SeededRng rng(11);
    for (int t = 0; t < 20; ++t) {
        auto img = random_image(3, 7 + t % 5, 9 + t % 3, rng);
        const double before = mean(img);
        gaussian_blur(img, rng.uniform(0.1, 2.0));
        EXPECT_NEAR(mean(img), before, 1e-4);
    }
}

TEST(GaussianBlur, NearDeltaAtSmallSigma) {
    auto img = smooth_image(32);
    auto out = img;
    gaussian_blur(out, 0.1);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(out.data[i], img.data[i], 0.02f);
}

TEST(GaussianBlur, DisabledNeverTriggers) {
    SeededRng rng(12);
    auto cfg = AugmentationConfig::color();
    cfg.blur.probability = 1.0;
    Image img(3, 4, 4, 0.5f);
    for (int i = 0; i < 100; ++i) EXPECT_FALSE(random_gaussian_blur(img, cfg, rng));
}

TEST(TriggerRates, WithinThreeSigma) {
    const std::size_t n = 10000;
    auto cfg = AugmentationConfig::grayscale_source(8);
    SeededRng rng(13);
    Image img(3, 8, 8, 0.5f);
    std::size_t jitter = 0, gray = 0, flip = 0, blur = 0;
    for (std::size_t i = 0; i < n; ++i) {
        jitter += color_jitter(img, cfg, rng);
        gray += random_grayscale(img, cfg, rng);
        flip += random_horizontal_flip(img, cfg, rng);
        blur += random_gaussian_blur(img, cfg, rng);
    }
    expect_rate(jitter, n, 0.8);
    expect_rate(gray, n, 0.2);
    expect_rate(flip, n, 0.5);
    expect_rate(blur, n, 0.5);
}

TEST(Pipeline, StagesPreserveUnitRangeAndShape) {
    SeededRng rng(14);
    auto cfg = AugmentationConfig::grayscale_source(32);
    for (int i = 0; i < 200; ++i) {
        auto img = random_image(3, 20 + i % 20, 24 + i % 11, rng);
        auto out = augment(img, cfg, rng);
        ASSERT_EQ(out.channels, 3u);
        ASSERT_EQ(out.height, 32u);
        ASSERT_EQ(out.width, 32u);
        ASSERT_TRUE(in_unit_range(out));
    }
}

TEST(MakeViews, IdentityPipeline) {
    SeededRng rng(15);
    auto x = random_image(3, 32, 32, rng);
    auto v = make_views(x, AugmentationConfig::identity(32), 99, 0);
    EXPECT_EQ(v.x, x);
    EXPECT_EQ(v.x1, x);
    EXPECT_EQ(v.x2, x);
}

TEST(MakeViews, DeterministicPerSeedAndStream) {
    SeededRng rng(16);
    auto x = random_image(3, 32, 32, rng);
    auto cfg = AugmentationConfig::grayscale_source(32);
    auto a = make_views(x, cfg, 5, 77), b = make_views(x, cfg, 5, 77), c = make_views(x, cfg, 5, 78);
    EXPECT_EQ(a.x1, b.x1);
    EXPECT_EQ(a.x2, b.x2);
    EXPECT_NE(a.x1, c.x1);
}

TEST(MakeViews, IndependentStreamsGiveDistinctViews) {
    auto ds = synthetic_dataset(250, 4, 3, 32);
    const auto cfg = AugmentationConfig::color(32);
    std::size_t distinct = 0;
    for (std::size_t i = 0; i < 1000; ++i) {
        auto v = make_views(ds.image(i), cfg, 21, i);
        distinct += v.x1 != v.x2;
    }
    EXPECT_GT(distinct, 990u);
}

TEST(Config, ValidateRejectsBadValues) {
    auto cfg = AugmentationConfig::color();
    EXPECT_NO_THROW(cfg.validate());
    cfg.grayscale_probability = 1.5;
    EXPECT_THROW(cfg.validate(), ParameterError);
    cfg = AugmentationConfig::color();
    cfg.crop_scale_min = 0.0;
    EXPECT_THROW(cfg.validate(), ParameterError);
    cfg = AugmentationConfig::color();
    cfg.blur.sigma_min = -1.0;
    EXPECT_THROW(cfg.validate(), ParameterError);
    EXPECT_TRUE(AugmentationConfig::grayscale_source().blur.enabled);
    EXPECT_FALSE(AugmentationConfig::color().blur.enabled);
}
