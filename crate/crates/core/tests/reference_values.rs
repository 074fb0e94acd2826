//! Frozen high-precision reference values.
//!
//! `log I_v(x)` was evaluated with mpmath at 60 digits. The vMF table was built
//! by one-dimensional quadrature over the polar angle (40 digits), so it does not
//! share the Bessel route used by the library.

use geonovel::special::log_bessel_i;
use geonovel::vmf::{log_norm_const, mean_resultant};

const LOG_BESSEL: &[(f64, f64, f64)] = &[
    (0.0, 1e-06, 0.000000000000249999999999984375),
    (0.0, 0.001, 0.00000024999998437500173611),
    (0.0, 0.1, 0.0024984392338762433813),
    (0.0, 1.0, 0.23591435850717864869),
    (0.0, 5.0, 3.3046817758225334338),
    (0.0, 20.0, 17.589610428244274291),
    (0.0, 50.0, 47.127575501871804584),
    (0.0, 150.0, 146.57657995035185909),
    (0.0, 500.0, 495.97400766810669646),
    (0.0, 2000.0, 1995.2806727526574305),
    (0.0, 10000.0, 9994.475903781432301),
    (0.5, 1e-06, -7.1335466316266978178),
    (0.5, 0.001, -3.6796688254691348473),
    (0.5, 0.1, -1.3754177876781698139),
    (0.5, 1.0, -0.064351991073531798753),
    (0.5, 5.0, 3.2762971096179065817),
    (0.5, 20.0, 17.583195330018331757),
    (0.5, 50.0, 47.125049964081254229),
    (0.5, 150.0, 146.57574381974719938),
    (0.5, 500.0, 495.97375741758423139),
    (0.5, 2000.0, 1995.2806102370242861),
    (0.5, 10000.0, 9994.4758912808072359),
    (1.0, 1e-06, -14.508657738524094414),
    (1.0, 0.001, -7.6009023345420849656),
    (1.0, 0.1, -2.9944825338622049398),
    (1.0, 1.0, -0.57064798749083128142),
    (1.0, 5.0, 3.1919420305456754634),
    (1.0, 20.0, 17.563954622519344304),
    (1.0, 50.0, 47.117473616587126523),
    (1.0, 150.0, 146.57323543738112852),
    (1.0, 500.0, 495.97300666626834446),
    (1.0, 2000.0, 1995.2804226901287651),
    (1.0, 10000.0, 9994.4758537789320718),
    (2.5, 1e-06, -37.47261794865755133),
    (2.5, 0.001, -20.203229679773709267),
    (2.5, 0.1, -8.6895900571972941734),
    (2.5, 1.0, -2.8629702657767536389),
    (2.5, 5.0, 2.6222658628966749347),
    (2.5, 20.0, 17.429461230076289684),
    (2.5, 50.0, 47.064450341952324595),
    (2.5, 150.0, 146.55567715759688521),
    (2.5, 500.0, 495.96775141762040476),
    (2.5, 2000.0, 1995.2791098620244269),
    (2.5, 10000.0, 9994.4755912658072361),
    (7.0, 1e-06, -110.08576553073491894),
    (7.0, 0.001, -61.731478546609990885),
    (7.0, 0.1, -29.494974781368472433),
    (7.0, 1.0, -13.345995653624480248),
    (7.0, 5.0, -1.3606697274726706779),
    (7.0, 20.0, 16.346256489504650782),
    (7.0, 50.0, 46.633411698346076225),
    (7.0, 150.0, 146.41272842370386444),
    (7.0, 500.0, 495.92495936671099761),
    (7.0, 2000.0, 1995.2684197010211821),
    (7.0, 10000.0, 9994.4734536590190997),
    (31.5, 1e-06, -536.84390417712726548),
    (31.5, 0.001, -319.24961288149764834),
    (31.5, 0.1, -174.18667510757647041),
    (31.5, 1.0, -101.64763017645606041),
    (31.5, 5.0, -50.76626758018069074),
    (31.5, 20.0, -4.3396450951449231119),
    (31.5, 50.0, 37.414920373467455609),
    (31.5, 150.0, 143.27021249820146232),
    (31.5, 500.0, 494.98109303312796283),
    (31.5, 2000.0, 1995.032553338650569),
    (31.5, 10000.0, 9994.4262888415740475),
    (63.0, 1e-06, -1115.0547539263073458),
    (63.0, 0.001, -679.86617134652646545),
    (63.0, 0.1, -389.74041057069469679),
    (63.0, 1.0, -244.6736826419241201),
    (63.0, 5.0, -143.18541725644034926),
    (63.0, 20.0, -54.402167509422277632),
    (63.0, 50.0, 10.926458406448826591),
    (63.0, 150.0, 133.49063515083394179),
    (63.0, 500.0, 492.00628754931535885),
    (63.0, 2000.0, 1994.2882567011066832),
    (63.0, 10000.0, 9994.277444514419713),
    (100.0, 1e-06, -1814.605149407985429),
    (100.0, 0.001, -1123.8296215072964788),
    (100.0, 0.1, -663.31257815849034532),
    (100.0, 1.0, -433.05161839406588626),
    (100.0, 5.0, -272.04843993599690559),
    (100.0, 20.0, -132.49551210817579275),
    (100.0, 50.0, -35.837833823878304186),
    (100.0, 150.0, 114.24720174479214484),
    (100.0, 500.0, 485.99712218134414574),
    (100.0, 2000.0, 1992.7805686380575476),
    (100.0, 10000.0, 9993.9758829465154784),
    (255.5, 1e-06, -4871.4462537526389306),
    (255.5, 0.001, -3106.5147799717282559),
    (255.5, 0.1, -1929.8937877061570608),
    (255.5, 1.0, -1341.5823315357420754),
    (255.5, 5.0, -930.34755424683846204),
    (255.5, 20.0, -575.78414129332408917),
    (255.5, 50.0, -339.63616737916820309),
    (255.5, 150.0, -40.278485531720526303),
    (255.5, 500.0, 431.9562593733684966),
    (255.5, 2000.0, 1978.9786484932750117),
    (255.5, 10000.0, 9991.2119056445814709),
    (511.0, 1e-06, -10093.746251387184995),
    (511.0, 0.001, -6563.8833038268246807),
    (511.0, 0.1, -4210.6413339045857962),
    (511.0, 1.0, -3034.0198679864233049),
    (511.0, 5.0, -2211.5853761275965274),
    (511.0, 20.0, -1503.0058891428128718),
    (511.0, 50.0, -1033.7573451449425346),
    (511.0, 150.0, -462.71380904433490288),
    (511.0, 500.0, 252.43462808653607551),
    (511.0, 2000.0, 1930.3329720032925658),
    (511.0, 10000.0, 9981.4220405436770329),
    (512.0, 1e-06, -10114.493233750748722),
    (512.0, 0.001, -6577.7225309114072227),
    (512.0, 0.1, -4219.8753908126974478),
    (512.0, 1.0, -3040.9513407438367047),
    (512.0, 5.0, -2216.9074338152973512),
    (512.0, 20.0, -1506.9420091842971312),
    (512.0, 50.0, -1036.7791650564203748),
    (512.0, 150.0, -464.65540602645370645),
    (512.0, 500.0, 251.53658407421320526),
    (512.0, 2000.0, 1930.0798709806105395),
    (512.0, 10000.0, 9981.370910270527314),
];

/// `(d, kappa, log C_d(kappa), A_d(kappa))`.
const VMF: &[(usize, f64, f64, f64)] = &[
    (2, 0.01, -1.8379020662530972196, 0.0049999375010416487633),
    (2, 0.5, -1.8994267855948267875, 0.24249961258080194535),
    (2, 1.0, -2.0737914249165241322, 0.44638996589653450705),
    (2, 10.0, -9.7808491495280410381, 0.94859982595484595897),
    (2, 100.0, -98.6176097563519292, 0.99498737300516876559),
    (3, 0.01, -2.5310409135804022568, 0.0033333111113227492064),
    (3, 0.5, -2.572349101582208902, 0.16395341373865284877),
    (3, 1.0, -2.6924636085404864266, 0.31303528549933130364),
    (3, 10.0, -9.535291971354146175, 0.90000000412230725337),
    (3, 100.0, -97.232706880421254116, 0.99),
    (5, 0.01, -3.2702990246962409132, 0.0019999942857396824176),
    (5, 0.5, -3.2952003944709574011, 0.099293556607689764453),
    (5, 1.0, -3.3689013133786362765, 0.19452804946532511362),
    (5, 10.0, -8.9652234336919610554, 0.81111110602184292038),
    (5, 100.0, -94.45536342498900679, 0.98010101010101010101),
    (16, 0.01, -1.3258280312891898679, 0.00062499978298624674469),
    (16, 0.5, -1.3336340189750448281, 0.031222915572631049613),
    (16, 1.0, -1.35702087765028362, 0.062284332675995444613),
    (16, 10.0, -4.0572990472682166443, 0.48762166797939138919),
    (16, 100.0, -79.000422404390203429, 0.92745916210972275987),
    (64, 0.01, 40.767719244324568997, 0.00015624999630089979121),
    (64, 0.5, 40.76576695836857667, 0.007812037665568765855),
    (64, 1.0, 40.759908450066447983, 0.015621302598621634365),
    (64, 10.0, 39.995445821914284201, 0.15271190419708313607),
    (64, 100.0, -8.0407654391750639578, 0.73238019409658213679),
];

#[test]
fn log_bessel_matches_reference_table() {
    let mut worst = (0.0, 0.0, 0.0);
    for &(v, x, want) in LOG_BESSEL {
        let got = log_bessel_i(v, x).unwrap();
        // an absolute error in log I is the relative error in I
        let err = (got - want).abs();
        if err > worst.2 {
            worst = (v, x, err);
        }
    }
    assert!(worst.2 <= 1e-10, "worst log I error {:e} at order {}, x {}", worst.2, worst.0, worst.1);
}

#[test]
fn norm_const_and_mean_resultant_match_quadrature() {
    for &(d, kappa, log_c, a) in VMF {
        let got_c = log_norm_const(d, kappa).unwrap();
        let got_a = mean_resultant(d, kappa).unwrap();
        assert!((got_c - log_c).abs() <= 1e-10 * log_c.abs().max(1.0), "log C_{d}({kappa}): {got_c} vs {log_c}");
        assert!((got_a - a).abs() <= 1e-10, "A_{d}({kappa}): {got_a} vs {a}");
    }
}
