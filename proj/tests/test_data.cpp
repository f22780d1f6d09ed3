#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "bvt/data.hpp"

using namespace bvt;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("bvt_test_data_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    os << text;
}

std::string twelve_byte_ppm() {
    std::string s = "P6\n2 2\n255\n";
    const unsigned char px[12] = {0, 51, 102, 153, 204, 255, 1, 2, 3, 254, 128, 127};
    s.append(reinterpret_cast<const char*>(px), 12);
    return s;
}

}  // namespace

TEST(NetpbmTest, TwelveBytePayloadParsesExactly) {
    std::istringstream is(twelve_byte_ppm());
    auto img = read_ppm(is);
    ASSERT_EQ(img.height, 2u);
    ASSERT_EQ(img.width, 2u);
    const unsigned char px[12] = {0, 51, 102, 153, 204, 255, 1, 2, 3, 254, 128, 127};
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x)
            for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(img.at(c, y, x), px[(y * 2 + x) * 3 + c] / 255.0);
}

TEST(NetpbmTest, HeaderCommentsAreSkipped) {
    std::string s = "P6\n# made by hand\n2 2\n# depth\n255\n";
    s += twelve_byte_ppm().substr(11);
    std::istringstream is(s);
    EXPECT_EQ(read_ppm(is).at(2, 1, 1), 127 / 255.0);
}

TEST(NetpbmTest, BadInputsAreRejected) {
    std::istringstream bad_magic("P3\n2 2\n255\n");
    EXPECT_THROW(read_ppm(bad_magic), FormatError);
    std::istringstream truncated(twelve_byte_ppm().substr(0, 18));
    EXPECT_THROW(read_ppm(truncated), FormatError);
    std::istringstream wide("P6\n2 2\n65535\n");
    EXPECT_THROW(read_ppm(wide), FormatError);
    std::istringstream gray_as_rgb("P5\n1 1\n255\nx");
    EXPECT_THROW(read_ppm(gray_as_rgb), FormatError);
}

TEST(NetpbmTest, WriteReadRoundTrip) {
    Image img{3, 3, 5, {}};
    for (std::size_t i = 0; i < 45; ++i) img.pixels.push_back(static_cast<double>((i * 37) % 256) / 255.0);
    std::stringstream ss;
    write_ppm(ss, img);
    auto back = read_ppm(ss);
    EXPECT_EQ(back.pixels, img.pixels);

    GrayImage g{2, 3, {0, 1, 2, 253, 254, 255}};
    std::stringstream gs;
    write_pgm(gs, g);
    EXPECT_EQ(read_pgm(gs).pixels, g.pixels);
}

TEST(NetpbmTest, QuantizeRoundsHalfUpAndClamps) {
    EXPECT_EQ(quantize(-0.2), 0);
    EXPECT_EQ(quantize(1.7), 255);
    EXPECT_EQ(quantize(0.5 / 255.0), 1);
    EXPECT_EQ(quantize(0.49 / 255.0), 0);
    for (int q = 0; q < 256; ++q) EXPECT_EQ(quantize(q / 255.0), q);
}

TEST(SyntheticTest, SameIndexIsBitIdentical) {
    auto spec = SyntheticSpec::three_class(7, 5);
    for (std::size_t i : {0u, 6u, 14u}) {
        auto a = render_synthetic(spec, i);
        auto b = render_synthetic(spec, i);
        EXPECT_EQ(a.image.pixels, b.image.pixels);
        EXPECT_EQ(a.mask.pixels, b.mask.pixels);
        EXPECT_EQ(a.split, b.split);
    }
    // a sample does not depend on how many others are generated
    auto big = SyntheticSpec::three_class(7, 5);
    big.classes[2].count = 50;
    EXPECT_EQ(render_synthetic(big, 3).image.pixels, render_synthetic(spec, 3).image.pixels);
    EXPECT_NE(render_synthetic(spec, 0).image.pixels, render_synthetic(spec, 1).image.pixels);
}

TEST(SyntheticTest, ImbalanceRatioMatchesCounts) {
    SyntheticSpec spec;
    spec.seed = 3;
    spec.image_size = 16;
    spec.classes = {{ShapeKind::disc, 0.0, 0.1, 100}, {ShapeKind::ring, 0.5, 0.1, 10}};
    auto ds = generate_synthetic(spec);
    EXPECT_DOUBLE_EQ(ds.imbalance_ratio(), 10.0);

    std::map<int, std::size_t> brute;
    for (const auto& s : ds.samples) brute[s.label]++;
    EXPECT_EQ(brute[0], 100u);
    EXPECT_EQ(brute[1], 10u);
}

TEST(SyntheticTest, LabelsFollowClassOrder) {
    auto ds = generate_synthetic(SyntheticSpec::three_class(1, 4, 16));
    ASSERT_EQ(ds.samples.size(), 12u);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(ds.samples[i].label, static_cast<int>(i / 4));
    EXPECT_EQ(ds.num_classes(), 3u);
}

TEST(SyntheticTest, MaskMatchesIndependentRasterization) {
    auto spec = SyntheticSpec::three_class(11, 6);
    const double pi = std::acos(-1.0);
    for (std::size_t i = 0; i < spec.total(); ++i) {
        auto s = render_synthetic(spec, i);
        const auto& g = *s.geometry;
        std::size_t on = 0;
        for (std::size_t y = 0; y < spec.image_size; ++y) {
            for (std::size_t x = 0; x < spec.image_size; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                const double r = std::hypot(px - g.cx, py - g.cy);
                bool inside = r <= g.radius;
                if (g.kind == ShapeKind::ring) inside = inside && r >= 0.5 * g.radius;
                if (g.kind == ShapeKind::wedge && inside) {
                    // angle measured counter-clockwise from start_angle
                    double a = std::atan2(py - g.cy, px - g.cx) - g.start_angle;
                    while (a < 0) a += 2 * pi;
                    while (a >= 2 * pi) a -= 2 * pi;
                    inside = a < 1.5 * pi;
                }
                const bool masked = s.mask.pixels[y * spec.image_size + x] == 255;
                EXPECT_EQ(masked, inside) << "sample " << i << " pixel " << x << "," << y;
                on += masked;
            }
        }
        EXPECT_GT(on, 10u);
    }
}

TEST(SyntheticTest, MaskedPixelsCarryTheShapeColour) {
    auto spec = SyntheticSpec::three_class(5, 4);
    for (std::size_t i = 0; i < spec.total(); ++i) {
        auto s = render_synthetic(spec, i);
        const std::size_t dominant = static_cast<std::size_t>(s.label);  // red, green, blue
        for (std::size_t y = 0; y < spec.image_size; ++y) {
            for (std::size_t x = 0; x < spec.image_size; ++x) {
                const double r = s.image.at(0, y, x), g = s.image.at(1, y, x), b = s.image.at(2, y, x);
                const double sat = std::max({r, g, b}) - std::min({r, g, b});
                if (s.mask.pixels[y * spec.image_size + x]) {
                    EXPECT_GT(sat, 0.3);
                    for (std::size_t c = 0; c < 3; ++c) {
                        if (c == dominant) continue;
                        EXPECT_GT(s.image.at(dominant, y, x), s.image.at(c, y, x));
                    }
                } else {
                    EXPECT_LT(sat, 0.15);
                }
            }
        }
    }
}

TEST(SyntheticTest, PixelsAreEightBitQuantized) {
    auto s = render_synthetic(SyntheticSpec::three_class(2, 3), 4);
    for (double v : s.image.pixels) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        EXPECT_EQ(v, quantize(v) / 255.0);
    }
}

TEST(SplitTest, PureFunctionOfSeedAndId) {
    std::size_t counts[3] = {0, 0, 0};
    for (std::uint64_t id = 0; id < 2000; ++id) {
        auto s = assign_split(9, id, 0.15, 0.15);
        EXPECT_EQ(s, assign_split(9, id, 0.15, 0.15));
        counts[static_cast<int>(s)]++;
    }
    EXPECT_NEAR(counts[1] / 2000.0, 0.15, 0.03);
    EXPECT_NEAR(counts[2] / 2000.0, 0.15, 0.03);
    auto ds = generate_synthetic(SyntheticSpec::three_class(9, 20, 16));
    auto again = generate_synthetic(SyntheticSpec::three_class(9, 20, 16));
    std::set<std::size_t> seen;
    for (Split sp : {Split::train, Split::val, Split::test}) {
        for (auto i : ds.indices(sp)) {
            EXPECT_TRUE(seen.insert(i).second);
            EXPECT_EQ(again.samples[i].split, sp);
        }
    }
    EXPECT_EQ(seen.size(), ds.samples.size());
    EXPECT_NO_THROW(ds.validate());
}

TEST(ImageFolderTest, GeneratedDatasetRoundTripsBitExactly) {
    auto dir = scratch_dir("roundtrip");
    auto ds = generate_synthetic(SyntheticSpec::three_class(4, 5, 16));
    write_image_folder(ds, dir);
    auto back = load_image_folder(dir, dir / "labels.csv");
    EXPECT_TRUE(back.errors.empty());
    ASSERT_EQ(back.samples.size(), ds.samples.size());
    EXPECT_EQ(back.num_classes(), 3u);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        EXPECT_EQ(back.samples[i].image.pixels, ds.samples[i].image.pixels);
        EXPECT_EQ(back.samples[i].mask.pixels, ds.samples[i].mask.pixels);
        EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
        EXPECT_EQ(back.samples[i].split, ds.samples[i].split);
    }
    auto a = make_batch(ds, {0, 7}, Family::bvt);
    auto b = make_batch(back, {0, 7}, Family::bvt);
    EXPECT_EQ(a.images.values(), b.images.values());
    fs::remove_all(dir);
}

TEST(ImageFolderTest, TwoBalancedImages) {
    auto dir = scratch_dir("two");
    write_text(dir / "a.ppm", twelve_byte_ppm());
    write_text(dir / "b.ppm", twelve_byte_ppm());
    write_text(dir / "labels.csv", "path,label,split\na.ppm,0,train\nb.ppm,1,train\n");
    auto ds = load_image_folder(dir, dir / "labels.csv");
    EXPECT_EQ(ds.samples.size(), 2u);
    EXPECT_EQ(ds.num_classes(), 2u);
    EXPECT_DOUBLE_EQ(ds.imbalance_ratio(), 1.0);
    EXPECT_EQ(ds.samples[1].image.at(1, 0, 0), 51 / 255.0);
    fs::remove_all(dir);
}

TEST(ImageFolderTest, MalformedRowsAreReported) {
    auto dir = scratch_dir("malformed");
    write_text(dir / "a.ppm", twelve_byte_ppm());
    write_text(dir / "bad.ppm", "P3\n2 2\n255\n");
    write_text(dir / "labels.csv",
               "a.ppm,0,train\n"
               "missing.ppm,0,train\n"
               "bad.ppm,1,train\n"
               "a.ppm,one,train\n"
               "a.ppm,1,holdout\n"
               "a.ppm,1\n");
    auto ds = load_image_folder(dir, dir / "labels.csv");
    EXPECT_EQ(ds.samples.size(), 1u);
    ASSERT_EQ(ds.errors.size(), 5u);
    EXPECT_NE(ds.errors[0].find("missing.ppm"), std::string::npos);
    EXPECT_NE(ds.errors[1].find("magic"), std::string::npos);
    EXPECT_NE(ds.errors[2].find("integer"), std::string::npos);
    EXPECT_NE(ds.errors[4].find("3 columns"), std::string::npos);
    fs::remove_all(dir);
}

TEST(ImageFolderTest, EmptyCsvIsAZeroClassError) {
    auto dir = scratch_dir("empty");
    write_text(dir / "labels.csv", "");
    EXPECT_THROW(load_image_folder(dir, dir / "labels.csv"), ValidationError);
    write_text(dir / "labels.csv", "path,label,split\n");
    EXPECT_THROW(load_image_folder(dir, dir / "labels.csv"), ValidationError);
    EXPECT_THROW(load_image_folder(dir, dir / "nope.csv"), std::runtime_error);
    fs::remove_all(dir);
}

TEST(DatasetTest, ValidateRejectsClassMissingFromTrain) {
    Dataset ds;
    ds.class_names = {"a", "b"};
    Sample s;
    s.label = 0;
    ds.samples.push_back(s);
    s.label = 1;
    s.split = Split::val;
    ds.samples.push_back(s);
    EXPECT_THROW(ds.validate(), ValidationError);
    ds.samples[1].split = Split::train;
    EXPECT_NO_THROW(ds.validate());
    ds.samples[1].label = 2;
    EXPECT_THROW(ds.validate(), ValidationError);
}

TEST(BatchTest, ChannelCountsFollowFamily) {
    auto ds = generate_synthetic(SyntheticSpec::three_class(2, 3, 16));
    std::vector<std::size_t> idx{0, 4, 8};
    EXPECT_EQ(make_batch(ds, idx, Family::bvt).images.shape(), (Shape{3, 6, 16, 16}));
    EXPECT_EQ(make_batch(ds, idx, Family::bwin).images.shape(), (Shape{3, 6, 16, 16}));
    EXPECT_EQ(make_batch(ds, idx, Family::vit).images.shape(), (Shape{3, 3, 16, 16}));
    EXPECT_EQ(make_batch(ds, idx, Family::swin).images.shape(), (Shape{3, 3, 16, 16}));
    EXPECT_EQ(make_batch(ds, idx, Family::vit).labels, (std::vector<int>{0, 1, 2}));
}

TEST(BatchTest, ComplementPairsSumToExactlyOne) {
    auto ds = generate_synthetic(SyntheticSpec::three_class(8, 4, 16));
    std::vector<std::size_t> idx(ds.samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    auto b = make_batch(ds, idx, Family::bvt);
    const auto& v = b.images.values();
    const std::size_t plane = 16 * 16;
    for (std::size_t n = 0; n < idx.size(); ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
                const double x = v[(n * 6 + c) * plane + p];
                EXPECT_EQ(x, ds.samples[n].image.pixels[c * plane + p]);
                EXPECT_EQ(x + v[(n * 6 + c + 3) * plane + p], 1.0);
            }
}

TEST(BatchTest, OptionalNormalizationOnThreeChannelPath) {
    auto ds = generate_synthetic(SyntheticSpec::three_class(8, 2, 16));
    ChannelNormalization norm;
    auto raw = make_batch(ds, {1}, Family::vit);
    auto normed = make_batch(ds, {1}, Family::vit, norm);
    for (std::size_t i = 0; i < raw.images.numel(); ++i)
        EXPECT_DOUBLE_EQ(normed.images.values()[i], (raw.images.values()[i] - 0.5) / 0.25);
    // ignored for the six-channel path
    EXPECT_EQ(make_batch(ds, {1}, Family::bvt, norm).images.values(), make_batch(ds, {1}, Family::bvt).images.values());
}
