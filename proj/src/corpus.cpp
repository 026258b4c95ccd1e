#include "diffwin/corpus.hpp"

#include <vector>

#include "diffwin/rng.hpp"

namespace diffwin::corpus {

namespace {

// Public-domain sources: Lincoln's Gettysburg Address (1863); Dickens,
// A Tale of Two Cities (1859); Melville, Moby-Dick (1851); Austen, Pride and
// Prejudice (1813); Shakespeare, Hamlet and Sonnet 18; the King James Bible
// (Genesis 1, Psalm 23); the Declaration of Independence (1776); the U.S.
// Constitution preamble (1787); Carroll, Alice's Adventures in Wonderland
// (1865); Poe, The Raven (1845); Whitman, O Captain! My Captain! (1865).
const char* kSeedText = R"(Four score and seven years ago our fathers brought forth on this continent a new nation, conceived in liberty, and dedicated to the proposition that all men are created equal. Now we are engaged in a great civil war, testing whether that nation, or any nation so conceived and so dedicated, can long endure. We are met on a great battlefield of that war. We have come to dedicate a portion of that field, as a final resting place for those who here gave their lives that that nation might live. It is altogether fitting and proper that we should do this. But, in a larger sense, we can not dedicate, we can not consecrate, we can not hallow this ground. The brave men, living and dead, who struggled here, have consecrated it, far above our poor power to add or detract. The world will little note, nor long remember what we say here, but it can never forget what they did here. It is for us the living, rather, to be dedicated here to the unfinished work which they who fought here have thus far so nobly advanced. It is rather for us to be here dedicated to the great task remaining before us, that from these honored dead we take increased devotion to that cause for which they gave the last full measure of devotion, that we here highly resolve that these dead shall not have died in vain, that this nation, under God, shall have a new birth of freedom, and that government of the people, by the people, for the people, shall not perish from the earth.
It was the best of times, it was the worst of times, it was the age of wisdom, it was the age of foolishness, it was the epoch of belief, it was the epoch of incredulity, it was the season of Light, it was the season of Darkness, it was the spring of hope, it was the winter of despair, we had everything before us, we had nothing before us, we were all going direct to Heaven, we were all going direct the other way. There were a king with a large jaw and a queen with a plain face, on the throne of England. There were a king with a large jaw and a queen with a fair face, on the throne of France. In both countries it was clearer than crystal to the lords of the State preserves of loaves and fishes, that things in general were settled for ever.
Call me Ishmael. Some years ago, never mind how long precisely, having little or no money in my purse, and nothing particular to interest me on shore, I thought I would sail about a little and see the watery part of the world. It is a way I have of driving off the spleen and regulating the circulation. Whenever I find myself growing grim about the mouth, whenever it is a damp, drizzly November in my soul, whenever I find myself involuntarily pausing before coffin warehouses, and bringing up the rear of every funeral I meet, and especially whenever my hypos get such an upper hand of me, that it requires a strong moral principle to prevent me from deliberately stepping into the street, and methodically knocking people's hats off, then, I account it high time to get to sea as soon as I can. This is my substitute for pistol and ball. With a philosophical flourish Cato throws himself upon his sword. I quietly take to the ship. There is nothing surprising in this. If they but knew it, almost all men in their degree, some time or other, cherish very nearly the same feelings towards the ocean with me.
It is a truth universally acknowledged, that a single man in possession of a good fortune, must be in want of a wife. However little known the feelings or views of such a man may be on his first entering a neighbourhood, this truth is so well fixed in the minds of the surrounding families, that he is considered as the rightful property of some one or other of their daughters. My dear Mr. Bennet, said his lady to him one day, have you heard that Netherfield Park is let at last? Mr. Bennet replied that he had not. But it is, returned she, for Mrs. Long has just been here, and she told me all about it. Mr. Bennet made no answer. Do not you want to know who has taken it, cried his wife impatiently. You want to tell me, and I have no objection to hearing it. This was invitation enough.
To be, or not to be, that is the question. Whether it is nobler in the mind to suffer the slings and arrows of outrageous fortune, or to take arms against a sea of troubles, and by opposing end them. To die, to sleep, no more, and by a sleep to say we end the heartache and the thousand natural shocks that flesh is heir to. It is a consummation devoutly to be wished. To die, to sleep. To sleep, perchance to dream. Ay, there is the rub, for in that sleep of death what dreams may come, when we have shuffled off this mortal coil, must give us pause. There is the respect that makes calamity of so long life.
Shall I compare thee to a summer's day? Thou art more lovely and more temperate. Rough winds do shake the darling buds of May, and summer's lease hath all too short a date. Sometime too hot the eye of heaven shines, and often is his gold complexion dimmed. And every fair from fair sometime declines, by chance or nature's changing course untrimmed. But thy eternal summer shall not fade, nor lose possession of that fair thou owest. Nor shall Death brag thou wanderest in his shade, when in eternal lines to time thou growest. So long as men can breathe or eyes can see, so long lives this, and this gives life to thee.
In the beginning God created the heaven and the earth. And the earth was without form, and void, and darkness was upon the face of the deep. And the Spirit of God moved upon the face of the waters. And God said, Let there be light, and there was light. And God saw the light, that it was good, and God divided the light from the darkness. And God called the light Day, and the darkness he called Night. And the evening and the morning were the first day. And God said, Let there be a firmament in the midst of the waters, and let it divide the waters from the waters. And God made the firmament, and divided the waters which were under the firmament from the waters which were above the firmament, and it was so. And God called the firmament Heaven. And the evening and the morning were the second day.
The Lord is my shepherd, I shall not want. He maketh me to lie down in green pastures, he leadeth me beside the still waters. He restoreth my soul, he leadeth me in the paths of righteousness for his name's sake. Yea, though I walk through the valley of the shadow of death, I will fear no evil, for thou art with me, thy rod and thy staff they comfort me. Thou preparest a table before me in the presence of mine enemies, thou anointest my head with oil, my cup runneth over. Surely goodness and mercy shall follow me all the days of my life, and I will dwell in the house of the Lord for ever.
When in the course of human events, it becomes necessary for one people to dissolve the political bands which have connected them with another, and to assume among the powers of the earth, the separate and equal station to which the laws of nature and of nature's God entitle them, a decent respect to the opinions of mankind requires that they should declare the causes which impel them to the separation. We hold these truths to be self-evident, that all men are created equal, that they are endowed by their Creator with certain unalienable rights, that among these are life, liberty and the pursuit of happiness. That to secure these rights, governments are instituted among men, deriving their just powers from the consent of the governed.
We the people of the United States, in order to form a more perfect union, establish justice, insure domestic tranquility, provide for the common defence, promote the general welfare, and secure the blessings of liberty to ourselves and our posterity, do ordain and establish this Constitution for the United States of America.
Alice was beginning to get very tired of sitting by her sister on the bank, and of having nothing to do. Once or twice she had peeped into the book her sister was reading, but it had no pictures or conversations in it. And what is the use of a book, thought Alice, without pictures or conversations? So she was considering in her own mind, as well as she could, for the hot day made her feel very sleepy and stupid, whether the pleasure of making a daisy chain would be worth the trouble of getting up and picking the daisies, when suddenly a White Rabbit with pink eyes ran close by her. There was nothing so very remarkable in that, nor did Alice think it so very much out of the way to hear the Rabbit say to itself, Oh dear! Oh dear! I shall be late! When she thought it over afterwards, it occurred to her that she ought to have wondered at this, but at the time it all seemed quite natural.
Once upon a midnight dreary, while I pondered, weak and weary, over many a quaint and curious volume of forgotten lore. While I nodded, nearly napping, suddenly there came a tapping, as of some one gently rapping, rapping at my chamber door. 'Tis some visitor, I muttered, tapping at my chamber door. Only this and nothing more. Ah, distinctly I remember it was in the bleak December, and each separate dying ember wrought its ghost upon the floor. Eagerly I wished the morrow. Vainly I had sought to borrow from my books surcease of sorrow, sorrow for the lost Lenore. For the rare and radiant maiden whom the angels name Lenore. Nameless here for evermore.
O Captain! my Captain! our fearful trip is done. The ship has weathered every rack, the prize we sought is won. The port is near, the bells I hear, the people all exulting, while follow eyes the steady keel, the vessel grim and daring. But O heart! heart! heart! O the bleeding drops of red, where on the deck my Captain lies, fallen cold and dead.
)";

std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
      continue;
    }
    cur += c;
    if ((c == '.' || c == '?' || c == '!') && cur.size() > 20) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

const std::string& seed_text() {
  static const std::string text = kSeedText;
  return text;
}

std::string builtin_corpus(std::size_t min_bytes, std::uint64_t seed) {
  const std::vector<std::string> sentences = split_sentences(seed_text());
  Rng rng(mix_key(seed, 0x636f72707573ULL));

  std::string out;
  out.reserve(min_bytes + 4096);
  std::vector<std::size_t> order(sentences.size());
  while (out.size() < min_bytes) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.next_below(i)]);
    int per_paragraph = 0;
    for (std::size_t idx : order) {
      std::string s = sentences[idx];
      while (!s.empty() && s.front() == ' ') s.erase(s.begin());
      out += s;
      if (++per_paragraph >= 6) {
        out += "\n\n";
        per_paragraph = 0;
      } else {
        out += ' ';
      }
    }
    out += '\n';
  }
  return out;
}

}  // namespace diffwin::corpus
