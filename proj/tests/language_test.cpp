#include "lcdforge/language.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace lcd;

TEST(Tasks, FamilySizesAndSplits) {
    EXPECT_EQ(all_tasks().size(), 16u);
    EXPECT_EQ(train_tasks().size(), 12u);
    EXPECT_EQ(heldout_tasks().size(), 4u);
    // every color/direction/region token still appears somewhere in training
    std::set<int> colors, dirs, regions;
    for (const auto& t : train_tasks()) {
        if (t.kind == TaskKind::PushBlock) {
            colors.insert(t.color);
            dirs.insert(t.direction);
        } else {
            regions.insert(t.region);
        }
    }
    EXPECT_EQ(colors.size(), 3u);
    EXPECT_EQ(dirs.size(), 4u);
    EXPECT_EQ(regions.size(), 3u);
}

TEST(Templates, MinimumCountsAndDisjoint) {
    for (const auto& t : all_tasks()) {
        const auto train = instruction_templates(t, TemplateSplit::Train);
        const auto held = instruction_templates(t, TemplateSplit::HeldOut);
        EXPECT_GE(train.size(), 4u) << t.id;
        EXPECT_GE(held.size(), 2u) << t.id;
        std::set<std::string> ts(train.begin(), train.end());
        for (const auto& h : held) EXPECT_EQ(ts.count(h), 0u) << t.id << ": " << h;
    }
}

TEST(Templates, SubstitutionProducesTaskWords) {
    const auto& task = task_by_id(all_tasks(), "push_red_left");
    const auto texts = instruction_templates(task, TemplateSplit::Train);
    for (const auto& s : texts) {
        EXPECT_NE(s.find("red"), std::string::npos) << s;
        EXPECT_NE(s.find("left"), std::string::npos) << s;
        EXPECT_EQ(s.find("{"), std::string::npos) << s;
    }
}

TEST(SampleInstruction, DeterministicGivenSeed) {
    EmbeddingProvider prov(64);
    const auto& task = task_by_id(all_tasks(), "push_red_left");
    Rng a(5), b(5);
    auto i1 = sample_instruction(task, TemplateSplit::Train, prov, a);
    auto i2 = sample_instruction(task, TemplateSplit::Train, prov, b);
    EXPECT_EQ(i1.text, i2.text);
    EXPECT_EQ(i1.embedding, i2.embedding);
    EXPECT_EQ(i1.task_id, "push_red_left");
}

TEST(SampleInstruction, CouponCollectorHitsEveryTemplate) {
    EmbeddingProvider prov(16);
    const auto& task = task_by_id(all_tasks(), "move_top_left");
    const auto texts = instruction_templates(task, TemplateSplit::Train);
    std::set<std::string> seen;
    Rng rng(9);
    for (int i = 0; i < 10000; ++i) seen.insert(sample_instruction(task, TemplateSplit::Train, prov, rng).text);
    EXPECT_EQ(seen.size(), texts.size());
}

TEST(Embed, DeterministicUnitNorm) {
    EmbeddingProvider prov(64);
    const auto a = prov.embed("push the red block left");
    const auto b = prov.embed("push the red block left");
    EXPECT_EQ(a, b);
    double n = 0;
    for (double v : a) n += v * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
}

TEST(Embed, DistinctTokensChangeEmbedding) {
    EmbeddingProvider prov(64);
    const auto a = prov.embed("push the red block left");
    const auto b = prov.embed("push the blue block left");
    double cos = 0;
    for (size_t i = 0; i < a.size(); ++i) cos += a[i] * b[i];
    EXPECT_LT(cos, 1.0 - 1e-4);
}

TEST(Embed, EmptyAfterTokenizationRejected) {
    EmbeddingProvider prov(16);
    EXPECT_THROW(prov.embed("...!!!"), std::invalid_argument);
}

TEST(ExternalTable, RoundTripBitwise) {
    EmbeddingProvider base(8);
    std::vector<std::pair<std::string, std::vector<double>>> entries;
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        std::vector<double> v(8);
        for (auto& x : v) x = rng.normal();
        entries.emplace_back("sentence number " + std::to_string(i), v);
    }
    const std::string path = "/tmp/lcdforge_embed_table.txt";
    EmbeddingProvider::save_external(path, 8, entries);
    EmbeddingProvider prov(8);
    prov.load_external(path);
    EXPECT_EQ(prov.external_size(), 100u);
    for (const auto& [text, vec] : entries) {
        const auto got = prov.embed(text);
        EXPECT_EQ(got, vec) << text;
    }
}

TEST(ExternalTable, FallbackContract) {
    EmbeddingProvider base(4);
    const std::string path = "/tmp/lcdforge_embed_one.txt";
    EmbeddingProvider::save_external(path, 4, {{"hello world", {1, 0, 0, 0}}});
    EmbeddingProvider prov(4);
    prov.load_external(path);
    EXPECT_EQ(prov.embed("hello world"), (std::vector<double>{1, 0, 0, 0}));
    // unlisted text falls back to the hash embedding when enabled
    EXPECT_NO_THROW(prov.embed("something else"));
    prov.set_fallback(false);
    EXPECT_THROW(prov.embed("something else"), std::out_of_range);
}

TEST(ExternalTable, WidthMismatchRejected) {
    const std::string path = "/tmp/lcdforge_embed_w.txt";
    EmbeddingProvider::save_external(path, 4, {{"hi there", {1, 0, 0, 0}}});
    EmbeddingProvider prov(8);
    EXPECT_THROW(prov.load_external(path), std::runtime_error);
}

TEST(SplitHygiene, HeldoutSetCatchesHeldoutText) {
    const auto& held = heldout_instruction_texts();
    EXPECT_FALSE(held.empty());
    const auto& task = task_by_id(all_tasks(), "push_red_left");
    for (const auto& t : instruction_templates(task, TemplateSplit::HeldOut)) EXPECT_EQ(held.count(t), 1u) << t;
    for (const auto& t : instruction_templates(task, TemplateSplit::Train)) EXPECT_EQ(held.count(t), 0u) << t;
}

TEST(Embed, HeldoutTemplateStaysNearTrainTemplates) {
    // language generalization hinges on held-out phrasings landing near the
    // train phrasings of the same task and away from other tasks
    EmbeddingProvider prov(64);
    const auto& task = task_by_id(all_tasks(), "push_red_left");
    const auto& other = task_by_id(all_tasks(), "push_blue_right");
    auto mean_cos = [&](const std::vector<std::string>& a, const std::vector<std::string>& b) {
        double acc = 0;
        int n = 0;
        for (const auto& sa : a)
            for (const auto& sb : b) {
                const auto ea = prov.embed(sa);
                const auto eb = prov.embed(sb);
                double c = 0;
                for (size_t i = 0; i < ea.size(); ++i) c += ea[i] * eb[i];
                acc += c;
                ++n;
            }
        return acc / n;
    };
    const auto train_same = instruction_templates(task, TemplateSplit::Train);
    const auto held_same = instruction_templates(task, TemplateSplit::HeldOut);
    const auto train_other = instruction_templates(other, TemplateSplit::Train);
    EXPECT_GT(mean_cos(held_same, train_same), mean_cos(held_same, train_other));
}
