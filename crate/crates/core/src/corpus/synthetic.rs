//! Template dialogues over synonym clusters, for desk-scale experiments
//! where the "right" substitutes for each word are known in advance.
//!
//! Every template mentions its slot words in the context and repeats them
//! in the response, so the correct response token at a slot is determined
//! by the context while its cluster-mates remain plausible substitutes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Conversation;
use crate::error::{Error, Result};
use crate::smoothing::SynonymLexicon;

/// `(context, response)` pairs; `{x}` and `{y}` are slots.
pub const TEMPLATES: [(&str, &str); 8] = [
    ("was your {x} {y} ?", "yes , my {x} was very {y} ."),
    ("i think the {x} is {y} .", "i agree , the {x} is {y} ."),
    ("is the {x} {y} or not ?", "the {x} is {y} , i believe ."),
    ("someone told me the {x} looks {y} .", "well , that {x} does look {y} ."),
    ("do you find the {x} {y} ?", "yes , i find it {y} ."),
    ("why is the {x} so {y} ?", "no idea why the {x} is so {y} ."),
    ("tell me about the {y} {x} .", "the {y} {x} is all i know ."),
    ("have you seen a {y} {x} ?", "never seen a {x} that {y} ."),
];

const DEFAULT_CLUSTERS: &str = "\
good,great,awesome;bad,awful,terrible;happy,glad,cheerful;sad,unhappy,gloomy;\
big,large,huge;small,tiny,little;fast,quick,rapid;slow,sluggish,leisurely;\
smart,clever,bright;funny,hilarious,amusing;angry,mad,furious;tired,sleepy,exhausted;\
rich,wealthy,affluent;easy,simple,effortless;hard,difficult,tough;beautiful,pretty,lovely;\
scary,frightening,terrifying;strange,odd,weird;calm,peaceful,relaxed;loud,noisy,deafening;\
cold,chilly,freezing;clean,tidy,neat;dirty,filthy,grimy;warm,cozy,toasty;\
movie,film,flick;car,automobile,vehicle;house,home,residence;job,work,occupation;\
friend,buddy,pal;doctor,physician,medic;shop,store,market;trip,journey,voyage;\
meal,dinner,feast;gift,present,offering;talk,chat,conversation;road,street,avenue;\
child,kid,youngster;photo,snapshot,portrait;money,cash,funds;song,tune,melody;\
book,novel,story;dog,puppy,hound;boat,ship,vessel;phone,mobile,cellphone;\
game,match,contest;teacher,tutor,instructor;party,celebration,gathering;city,town,metropolis";

/// Parse `a,b,c;d,e` into clusters. Empty members and clusters are dropped.
pub fn parse_clusters(spec: &str) -> Result<Vec<Vec<String>>> {
    let clusters: Vec<Vec<String>> = spec
        .split(';')
        .map(|c| {
            c.split(',')
                .map(|w| w.trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect::<Vec<_>>()
        })
        .filter(|c| !c.is_empty())
        .collect();
    if clusters.is_empty() {
        return Err(Error::Config("cluster specification is empty".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for word in clusters.iter().flatten() {
        if word.chars().any(|c| c.is_whitespace() || c.is_ascii_punctuation()) {
            return Err(Error::Config(format!("cluster word `{word}` is not a single token")));
        }
        if !seen.insert(word.clone()) {
            return Err(Error::Config(format!("`{word}` appears in more than one cluster")));
        }
    }
    Ok(clusters)
}

/// 48 three-word clusters, half adjectives and half nouns.
pub fn default_clusters() -> Vec<Vec<String>> {
    parse_clusters(DEFAULT_CLUSTERS).expect("built-in clusters are valid")
}

/// Two-turn dialogues from [`TEMPLATES`], with slots filled by cluster
/// members. Returns the conversations and the lexicon that relates each
/// cluster's members. The output depends only on the arguments.
pub fn synthetic_corpus(
    seed: u64,
    n_conversations: usize,
    clusters: &[Vec<String>],
) -> Result<(Vec<Conversation>, SynonymLexicon)> {
    if n_conversations == 0 {
        return Err(Error::Config("need at least one conversation".into()));
    }
    if clusters.is_empty() || clusters.iter().any(|c| c.is_empty()) {
        return Err(Error::Config("clusters must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conversations = Vec::with_capacity(n_conversations);
    for _ in 0..n_conversations {
        let (context, response) = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let x = clusters.choose(&mut rng).unwrap().choose(&mut rng).unwrap();
        let y = clusters.choose(&mut rng).unwrap().choose(&mut rng).unwrap();
        let fill = |t: &str| t.replace("{x}", x).replace("{y}", y);
        conversations.push(Conversation::new(vec![fill(context), fill(response)])?);
    }
    Ok((conversations, SynonymLexicon::from_clusters(clusters)))
}

/// Vectors in which cluster members sit near a shared centre (pairwise
/// cosine around 0.8) and every other word is independent noise.
pub fn synthetic_embeddings(
    words: &[String],
    clusters: &[Vec<String>],
    dim: usize,
    seed: u64,
) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let mut by_word = std::collections::HashMap::new();
    for cluster in clusters {
        let centre = uniform(dim);
        for word in cluster {
            let noise = uniform(dim);
            let v: Vec<f64> = centre.iter().zip(&noise).map(|(c, n)| c + 0.5 * n).collect();
            by_word.insert(word.clone(), v);
        }
    }
    words
        .iter()
        .map(|w| {
            let v = by_word.remove(w).unwrap_or_else(|| uniform(dim));
            (w.clone(), v)
        })
        .collect()
}
